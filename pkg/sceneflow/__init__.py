"""
Scene flow data recipe, scale-adaptive losses and evaluation toolkit.
"""
