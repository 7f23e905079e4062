"""Synthetic paired audio-visual tasks and their on-disk datasets"""
