"""python -m adaptparse"""
import sys

from adaptparse.main import main

sys.exit(main())
