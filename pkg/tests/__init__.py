"""
Scene-flow toolkit test package.
"""
