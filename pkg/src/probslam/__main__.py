import sys

from probslam.cli import main

sys.exit(main())
