import sys

from app import main
from config import __version__

__all__ = ["main", "__version__"]


if __name__ == "__main__":
    sys.exit(main())
