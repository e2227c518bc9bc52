"""Self-supervised WiFi CSI pre-training and skeleton-constrained pose decoding."""
