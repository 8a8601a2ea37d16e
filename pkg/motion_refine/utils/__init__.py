from .io import read_json, write_json, require, as_array
