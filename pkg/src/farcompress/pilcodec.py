"""Stand-alone JPEG encoder/decoder commands backed by Pillow.

Used as the default external codec when ``cjpeg``/``djpeg`` are unavailable::

    python -m farcompress.pilcodec encode --quality 40 in.png out.jpg
    python -m farcompress.pilcodec decode out.jpg decoded.png
    python -m farcompress.pilcodec copy --quality 0 in.png out.png   # identity codec
"""

import argparse
import shutil
import sys

from PIL import Image


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="python -m farcompress.pilcodec")
    parser.add_argument("action", choices=["encode", "decode", "copy"])
    parser.add_argument("--quality", type=int, default=75)
    parser.add_argument("--subsampling", type=int, default=2, help="0=4:4:4, 1=4:2:2, 2=4:2:0")
    parser.add_argument("input")
    parser.add_argument("output")
    args = parser.parse_args(argv)

    if args.action == "copy":
        shutil.copyfile(args.input, args.output)
    elif args.action == "encode":
        with Image.open(args.input) as im:
            im.convert("RGB").save(
                args.output, format="JPEG", quality=args.quality, subsampling=args.subsampling, optimize=False
            )
    else:
        with Image.open(args.input) as im:
            im.convert("RGB").save(args.output, format="PNG")
    return 0


if __name__ == "__main__":
    sys.exit(main())
