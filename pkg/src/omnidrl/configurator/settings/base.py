import os

# Worker cap for scene generation and candidate rendering
OMNIDRL_THREADS = int(os.getenv("OMNIDRL_THREADS", str(os.cpu_count() or 1)))

# Root log level used by the CLI
LOG_LEVEL = os.getenv("OMNIDRL_LOG_LEVEL", "INFO").upper()

# Checkpoint period in training steps when the run config leaves it unset
CHECKPOINT_EVERY = int(os.getenv("OMNIDRL_CHECKPOINT_EVERY", "10000"))

# Numerical tolerance of the sphere model: points with n_z <= EPSILON are at infinity
PROJECTION_EPSILON = 1e-9

# Format version written into checkpoints and manifests
CHECKPOINT_FORMAT_VERSION = 1
