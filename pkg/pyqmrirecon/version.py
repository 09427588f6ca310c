"""
current version of pyqmrirecon
"""

VERSION = '2023.1'
YEAR = '2023'
