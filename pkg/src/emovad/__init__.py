"""Voice-activity-gated speech emotion recognition over frozen SSL feature stacks."""

__version__ = "0.1.0"

EMOTIONS = ("happy", "sad", "neutral", "angry")
N_EMOTIONS = len(EMOTIONS)
N_LAYERS = 13
