#!/usr/bin/env python
'''
satde_cli.py

Launcher for the satde command line tools. See satde/cli.py.
'''
import sys

from satde.cli import main

if __name__ == '__main__':
    sys.exit(main())
