SECONDS_PER_FRAME = 0.4
OBSERVED_FRAMES = 8
PREDICTED_FRAMES = 12
WINDOW_FRAMES = OBSERVED_FRAMES + PREDICTED_FRAMES

NEIGHBOR_RADIUS = 100.0
COLLISION_RADIUS = 50.0
FEATURE_SCALE = 0.01

HISTORY_LENGTH = 7
SIGMA_LATENT = 1.3
LOG_SCALE_CLAMP = 20.0
COINCIDENT_DISTANCE = 1e-9

PIXEL_DISC_RADIUS = 7.5

CHECKPOINT_FORMAT_VERSION = 1
