"""Dynamic risk prediction from many longitudinal markers by model averaging of joint models."""

__version__ = "0.1.0"
