import sys

from fedobp.cli import main

sys.exit(main())
