"""
stemedit - command-line entry point.

Usage: python main.py <command> [options]; see ``python main.py --help``.
"""

from modules.cli import main

if __name__ == "__main__":
    main()
