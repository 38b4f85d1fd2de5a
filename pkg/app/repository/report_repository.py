import csv
import logging
import os

from version import __version__

logger = logging.getLogger(__name__)


def _ensure_parent(path):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)


def format_value(value):
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if value is None:
        return 'none'
    return str(value)


def write_csv(path, header, rows, meta=None):
    """
    Writes a CSV with a header row and, when `meta` is given, a sidecar `<path>.meta`.

    Args:
        path (str): Destination file.
        header (list): Column names.
        rows (list): Row sequences.
        meta (dict, optional): Sidecar records (config echo, seed, ...); the code version is added.

    Returns:
        str: The CSV path.
    """
    _ensure_parent(path)
    with open(path, mode='w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])
    if meta is not None:
        write_meta(path + '.meta', meta)
    logger.info(f"Wrote {len(rows)} rows to {path}")
    return path


def write_meta(path, meta):
    """
    Sidecar metadata: `key=value` lines, with multi-line values (such as a config echo)
    written as `key.<line>=...` records.
    """
    records = [('code_version', __version__)]
    for key, value in meta.items():
        if isinstance(value, str) and '\n' in value.strip():
            for line in value.strip().split('\n'):
                sub_key, _, sub_value = line.partition('=')
                records.append((f"{key}.{sub_key}", sub_value))
        else:
            records.append((key, format_value(value)))
    write_kv(path, records)


def write_kv(path, records):
    """
    Writes `key=value` records, one per line.
    """
    _ensure_parent(path)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for key, value in records:
            f.write(f"{key}={format_value(value)}\n")
    return path


def write_text(path, text):
    _ensure_parent(path)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(text)
    return path
