import sys

from mean_cvgl.cli import main

sys.exit(main())
