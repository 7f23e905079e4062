"""Configuration, model assembly, incremental training and checkpoints"""
