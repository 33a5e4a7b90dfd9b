"""Sensing, localization, planning and control for high-accuracy mobile manipulation."""
