"""Image rectangling library: mesh warps, energy optimization, synthesis and metrics."""
