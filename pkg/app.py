import sys

from imgp.resources.cli import main

if __name__ == "__main__":
    sys.exit(main())
