import sys

from tlab.cli import main

sys.exit(main())
