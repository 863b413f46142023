import sys

from PartAlign.cli import main

sys.exit(main())
