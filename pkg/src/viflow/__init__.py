"""Visual-inertial optical flow: geometry, autodiff, model, training, data and evaluation."""
