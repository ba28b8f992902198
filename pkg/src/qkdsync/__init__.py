"""Plug&play QKD synchronisation and tap-attack simulator."""
