import sys

from mmflow.cli import main

sys.exit(main())
