import sys

from satnmt.cli import main

sys.exit(main())
