import sys

from .ui_main import main

if __name__ == "__main__":
  sys.exit(main())
