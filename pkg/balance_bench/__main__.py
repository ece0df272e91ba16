"""
Main entry point for balance-bench when run as a module.
"""

from .cli import main

if __name__ == '__main__':
    main()
