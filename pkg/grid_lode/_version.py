'''Short file to provide version and author information for this package'''

__version__ = '0.3.0'
__author__ = 'grid_lode contributors'
