import sys

from wattline.cli import main

sys.exit(main())
