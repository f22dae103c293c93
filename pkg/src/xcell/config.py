"""Key-value config files.

Format: one `key = value` per line, `#` comments.  Documented keys:
pool_bytes, num_cpus, refill_watermark, refill_quantum, page_size.
Sizes accept K/M/G suffixes.
"""

from .errors import ConfigurationError
from .pagetable import PAGE_SIZE

_SUFFIXES = {"K": 1024, "M": 1024 ** 2, "G": 1024 ** 3}

KNOWN_KEYS = {"pool_bytes", "num_cpus", "refill_watermark",
              "refill_quantum", "page_size", "sandbox_dir"}


def parse_size(text):
    text = str(text).strip().upper()
    for suffix, mult in _SUFFIXES.items():
        if text.endswith(suffix + "B"):
            text = text[:-1]
        if text.endswith(suffix):
            return int(float(text[:-1]) * mult)
    return int(text)


def load_config(path):
    values = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key = value")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in KNOWN_KEYS:
                raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = value.strip()
    out = {}
    if "pool_bytes" in values:
        out["pool_bytes"] = parse_size(values["pool_bytes"])
    for key in ("num_cpus", "refill_watermark", "refill_quantum"):
        if key in values:
            out[key] = int(values[key])
    if "page_size" in values:
        page_size = parse_size(values["page_size"])
        if page_size != PAGE_SIZE:
            raise ConfigurationError(
                f"only page_size = {PAGE_SIZE} is supported")
        out["page_size"] = page_size
    if "sandbox_dir" in values:
        out["sandbox_dir"] = values["sandbox_dir"]
    return out
