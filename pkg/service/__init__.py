"""
HTTP embedding service used by the remote embedding provider.
"""
