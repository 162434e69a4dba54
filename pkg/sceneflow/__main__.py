import sys

from sceneflow.cli import main

sys.exit(main())
