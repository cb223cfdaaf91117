"""Actional-structural graph convolution for skeleton action recognition and pose prediction."""
