import sys

from flsim.harness.cli import main

sys.exit(main())
