import zlib

import numpy as np

from relso.exceptions import ImproperlyConfigured

STREAMS = ("init", "batching", "negatives", "interp", "proposals", "seeds")


def import_from_path(dotted_path, setting="callable"):
    """Resolve ``package.module.attr`` to the object it names"""
    try:
        assert dotted_path
        module, attr = dotted_path.rsplit(".", 1)
        return getattr(__import__(module, {}, {}, [attr]), attr)
    except ImportError as e:
        raise ImproperlyConfigured("Could not import {} {}: {}".format(setting, dotted_path, e))
    except (AssertionError, ValueError, AttributeError):
        raise ImproperlyConfigured("{} {!r} is not a valid dotted path".format(setting, dotted_path))


def _key(label):
    return zlib.crc32(label.encode("utf-8")) if isinstance(label, str) else int(label)


def rng_stream(seed, name, *labels):
    """Independent generator for one named feature of a run

    Streams with different names never share state, so turning a feature on
    or off leaves every other stream untouched. Extra ``labels`` (text or
    integers) split a stream further, e.g. per optimizer method and seed.
    """
    if name not in STREAMS:
        raise ImproperlyConfigured("unknown rng stream {!r}".format(name))
    spawn_key = tuple(_key(label) for label in (name,) + labels)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=spawn_key))


def rng_state(rng):
    """JSON-friendly snapshot of a generator's bit state"""
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": {k: int(v) for k, v in state["state"].items()},
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def percentile_threshold(values, pct):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ImproperlyConfigured("cannot take a percentile of no values")
    if not 0 <= pct <= 100:
        raise ImproperlyConfigured("percentile must lie in [0, 100], got {}".format(pct))
    return float(np.percentile(values, pct))

