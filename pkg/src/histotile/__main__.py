import sys

from histotile.cli import main

sys.exit(main())
