"""
Voice safety guard: audio to safety decision through a frozen speech encoder.
"""
