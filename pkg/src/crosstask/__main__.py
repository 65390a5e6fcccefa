from crosstask.cli import main
import sys
sys.exit(main())
