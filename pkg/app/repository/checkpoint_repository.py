import logging
import os

import numpy as np

logger = logging.getLogger(__name__)

FORMAT_HEADER = 'patchmixer-checkpoint'
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised when a checkpoint file cannot be read."""


def _hex_values(array):
    return ' '.join(float(v).hex() for v in array.reshape(-1))


def save_checkpoint(path, state, config_text):
    """
    Writes tensors as flat text; values are float.hex strings so they round-trip bitwise.

    Layout:
        patchmixer-checkpoint 1
        config <n>        followed by n lines of the run config echo
        tensor <name> <dtype> <d1>x<d2>...   followed by one line of values
        end

    Args:
        path (str): Destination file.
        state (dict): Name -> np.ndarray, written in iteration order.
        config_text (str): Canonical run config.
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    config_lines = config_text.rstrip('\n').split('\n') if config_text else []
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(f"{FORMAT_HEADER} {FORMAT_VERSION}\n")
        f.write(f"config {len(config_lines)}\n")
        for line in config_lines:
            f.write(line + "\n")
        for name, array in state.items():
            shape = 'x'.join(str(d) for d in array.shape) or 'scalar'
            f.write(f"tensor {name} {array.dtype.name} {shape}\n")
            f.write(_hex_values(array) + "\n")
        f.write("end\n")
    logger.info(f"Saved checkpoint with {len(state)} tensors to {path}")


def load_checkpoint(path):
    """
    Reads a checkpoint written by `save_checkpoint`.

    Args:
        path (str): Checkpoint file.

    Returns:
        tuple: (state dict of name -> np.ndarray, config text)
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found at {path}")
    with open(path, 'r', encoding='utf-8') as f:
        lines = f.read().split('\n')

    header = lines[0].split()
    if len(header) != 2 or header[0] != FORMAT_HEADER:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if int(header[1]) != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header[1]}")

    tag, count = lines[1].split()
    if tag != 'config':
        raise CheckpointError(f"{path}: missing config section")
    count = int(count)
    config_text = "\n".join(lines[2:2 + count]) + ("\n" if count else "")

    state = {}
    i = 2 + count
    while i < len(lines) and lines[i] != 'end':
        parts = lines[i].split()
        if len(parts) != 4 or parts[0] != 'tensor':
            raise CheckpointError(f"{path}: line {i + 1}: expected a tensor record")
        _, name, dtype, shape_text = parts
        shape = () if shape_text == 'scalar' else tuple(int(d) for d in shape_text.split('x'))
        values = [float.fromhex(token) for token in lines[i + 1].split()]
        array = np.array(values, dtype=np.dtype(dtype))
        if array.size != int(np.prod(shape)):
            raise CheckpointError(f"{path}: tensor '{name}' has {array.size} values for shape {shape}")
        state[name] = array.reshape(shape)
        i += 2
    if i >= len(lines):
        raise CheckpointError(f"{path}: truncated file (no end marker)")
    return state, config_text
