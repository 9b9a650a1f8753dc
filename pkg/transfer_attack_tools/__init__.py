"""
Main module of the project. Defines only the version atm.
"""

__version__ = "0.1.0"
