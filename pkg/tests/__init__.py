"""
balance-bench test suite.

Unit and property tests run by default; statistical reproductions are marked
``slow`` and need ``pytest -m slow``.
"""
