import numpy as np

from core.exceptions import ConfigError


def positional_encoding(length, dim):
    """Sinusoidal encoding: pe[t, 2k] = sin(t / 10000^(2k/D)), pe[t, 2k+1] = cos(same)."""
    if dim % 2:
        raise ConfigError(f"positional encoding needs an even model_dim, got {dim}")
    positions = np.arange(length, dtype=np.float64)[:, None]
    rates = 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(positions / rates)
    pe[:, 1::2] = np.cos(positions / rates)
    return pe
