'''
.. include:: ../../README.md
'''
__docformat__ = 'restructuredtext'
__all__ = []
