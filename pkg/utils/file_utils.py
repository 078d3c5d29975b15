import json
import os


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def read_json(filename):
    with open(filename, 'r') as f:
        return json.load(f)


def write_json(filename, data):
    with open(filename, 'w') as f:
        json.dump(data, f, indent=4)
    return filename


def write_csv(frame, filename):
    frame.to_csv(filename, index=False)
    return filename


def write_tsv(frame, filename):
    frame.to_csv(filename, sep='\t', index=False)
    return filename
