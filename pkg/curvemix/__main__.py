import sys

from curvemix.cli import main

sys.exit(main())
