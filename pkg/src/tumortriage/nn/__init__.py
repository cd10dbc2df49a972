"""Minimal NHWC float32 neural network engine with hand-written backward passes."""
