"""Frozen dual encoder and the three injected components"""
