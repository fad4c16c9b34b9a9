import sys

from cmlrain.cli import main

sys.exit(main())
