import sys

from . import cli

sys.exit(cli(sys.argv[1:]))
