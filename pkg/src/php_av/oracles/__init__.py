"""Slow reference implementations used only by the tests"""
