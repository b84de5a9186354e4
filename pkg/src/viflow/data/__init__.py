"""Synthetic visual-inertial data: trajectories, scenes, IMU, motion codes and datasets."""
