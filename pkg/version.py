"""Version information for mcdnet."""
VERSION = "0.3.0"
