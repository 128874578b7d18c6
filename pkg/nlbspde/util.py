import hashlib
import json
import os
import tempfile

import numpy as np
import pandas as pd

RESULT_COLUMNS = ['timestamp', 'experiment_id', 'command', 'config_hash',
                  'check', 'value', 'tolerance', 'passed', 'detail']

PATH_DUMP_MAGIC = int.from_bytes(b'NLBSPATH', 'little')
PATH_DUMP_VERSION = 1
PATH_RECORD_FIELDS = ('tau', 'y_T', 'int_lambda_dt', 'int_beta_bar_dw',
                      'int_beta_bar2_dt', 'alive')


def to_builtin(obj):
    """
    Convert numpy scalars and arrays to plain python objects.

    Parameters
    ----------
    obj: object
        Object to convert, typically nested dicts and lists.

    Return
    ------
    object: Object accepted by json.dumps.
    """
    if isinstance(obj, dict):
        return {str(k): to_builtin(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_builtin(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_builtin(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        if not np.isfinite(value):
            return str(value)
        return value
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def canonical_json(obj):
    return json.dumps(to_builtin(obj), sort_keys=True, separators=(',', ':'))


def config_hash(config_dict):
    """
    Hash of a validated configuration.

    The `output` section is left out so that writing the same experiment to
    another place does not change its identity.

    Parameters
    ----------
    config_dict: dict
        Validated configuration as plain data.

    Return
    ------
    string: First 16 hexadecimal characters of the sha256 digest.
    """
    data = {k: v for k, v in config_dict.items() if k != 'output'}
    digest = hashlib.sha256(canonical_json(data).encode('utf-8'))
    return digest.hexdigest()[:16]


def atomic_write_bytes(path, payload):
    """
    Write a file whole or not at all.

    Parameters
    ----------
    path: string
        Destination.
    payload: bytes
        File content.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix='.tmp-',
                               suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def results_frame(records):
    """Table of check records in the stable column order."""
    rows = []
    for record in records:
        row = {k: record.get(k) for k in RESULT_COLUMNS}
        row['detail'] = canonical_json(record.get('detail') or {})
        rows.append(row)
    return pd.DataFrame(rows, columns=RESULT_COLUMNS)


def write_results(records, path, fmt='csv', meta=None):
    """
    Write check records as CSV or as a JSON mirror.

    Parameters
    ----------
    records: list of dict
        One dict per check with the keys of RESULT_COLUMNS.
    path: string
        Output file.
    fmt: string
        'csv' or 'json'.
    meta: dict
        Run metadata (wall time, versions); only written in JSON.
    """
    frame = results_frame(records)
    if fmt == 'csv':
        payload = frame.to_csv(index=False, lineterminator='\n')
    elif fmt == 'json':
        rows = frame.to_dict(orient='records')
        for row in rows:
            row['detail'] = json.loads(row['detail'])
        payload = json.dumps(to_builtin({'meta': meta or {}, 'records': rows}),
                             sort_keys=True, indent=2) + '\n'
    else:
        raise ValueError('Unknown result format {}.'.format(fmt))
    atomic_write_bytes(path, payload.encode('utf-8'))


def write_path_dump(path, records, dt_mc, horizon):
    """
    Write raw Monte Carlo path records.

    Layout (little endian): int64 magic, int64 version, int64 n_paths,
    float64 dt_mc, float64 T, then n_paths records of float64 in the order
    of PATH_RECORD_FIELDS.

    Parameters
    ----------
    path: string
        Output file.
    records: ndarray
        Shape (n_paths, len(PATH_RECORD_FIELDS)).
    dt_mc: float
        Monte Carlo time step.
    horizon: float
        Simulated horizon T.
    """
    records = np.ascontiguousarray(records, dtype='<f8')
    assert records.ndim == 2 and records.shape[1] == len(PATH_RECORD_FIELDS)
    header = np.array([PATH_DUMP_MAGIC, PATH_DUMP_VERSION, records.shape[0]],
                      dtype='<i8').tobytes()
    header += np.array([dt_mc, horizon], dtype='<f8').tobytes()
    atomic_write_bytes(path, header + records.tobytes())


def read_path_dump(path):
    """
    Read a file written by `write_path_dump`.

    Return
    ------
    records: ndarray
    dt_mc: float
    horizon: float
    """
    with open(path, 'rb') as f:
        raw = f.read()
    magic, version, n_paths = np.frombuffer(raw[:24], dtype='<i8')
    if magic != PATH_DUMP_MAGIC or version != PATH_DUMP_VERSION:
        raise ValueError('{} is not a path dump (version {}).'.format(
            path, PATH_DUMP_VERSION))
    dt_mc, horizon = np.frombuffer(raw[24:40], dtype='<f8')
    records = np.frombuffer(raw[40:], dtype='<f8').reshape(
        int(n_paths), len(PATH_RECORD_FIELDS))
    return records, float(dt_mc), float(horizon)
