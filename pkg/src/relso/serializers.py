"""CSV and JSON artifacts written by the command line

Each CSV starts with a ``# schema_version: N`` comment line followed by the
header; columns and their order come from the serializer's ``Meta``.
"""
import json
import logging

import numpy as np
import pandas as pd

from relso.exceptions import ValidationError

logger = logging.getLogger(__name__)


class CsvSerializer:
    class Meta:
        fields = ()
        schema_version = 1

    def __init__(self, rows):
        self.rows = list(rows)

    def to_frame(self):
        fields = list(self.Meta.fields)
        for i, row in enumerate(self.rows):
            missing = [f for f in fields if f not in row]
            if missing:
                raise ValidationError("{}: row {} lacks {}".format(type(self).__name__, i, ", ".join(missing)))
        return pd.DataFrame([[row[f] for f in fields] for row in self.rows], columns=fields)

    def write(self, path):
        frame = self.to_frame()
        with open(path, "w", newline="") as fh:
            fh.write("# schema_version: {}\n".format(self.Meta.schema_version))
            frame.to_csv(fh, index=False, lineterminator="\n")
        logger.debug("wrote %s (%d rows)", path, len(frame))
        return path

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            first = fh.readline().strip()
        expected = "# schema_version: {}".format(cls.Meta.schema_version)
        if first != expected:
            raise ValidationError("{} does not start with {!r}".format(path, expected))
        frame = pd.read_csv(path, comment="#", keep_default_na=False)
        if tuple(frame.columns) != tuple(cls.Meta.fields):
            raise ValidationError("{}: unexpected columns {}".format(path, list(frame.columns)))
        return frame


class DatasetSerializer(CsvSerializer):
    class Meta:
        fields = ("sequence", "fitness", "split")
        schema_version = 1


class MetricLogSerializer(CsvSerializer):
    class Meta:
        fields = (
            "step",
            "recon",
            "fitness",
            "neg_sampling",
            "interp",
            "latent_norm",
            "spectral",
            "total",
            "val_accuracy",
            "val_perplexity",
            "val_mse",
            "val_spearman",
        )
        schema_version = 1


class BenchmarkSerializer(CsvSerializer):
    class Meta:
        fields = ("method", "seed_id", "step", "predicted_fitness", "accepted", "sequence")
        schema_version = 1


class PhiSummarySerializer(CsvSerializer):
    class Meta:
        fields = (
            "method",
            "phi_size",
            "max_fitness",
            "mean_fitness",
            "std_fitness",
            "novelty",
            "diversity",
            "true_max_fitness",
            "true_mean_fitness",
            "evaluations",
        )
        schema_version = 1


class LatentCoordsSerializer(CsvSerializer):
    class Meta:
        fields = ("id", "pc1", "pc2", "fitness")
        schema_version = 1


class SmoothnessSerializer(CsvSerializer):
    class Meta:
        fields = ("representation", "signal", "value", "k", "n")
        schema_version = 1


class AttentionMeanSerializer(CsvSerializer):
    class Meta:
        fields = ("row", "col", "weight")
        schema_version = 1


class PositionalAttentionSerializer(CsvSerializer):
    class Meta:
        fields = ("position", "weight")
        schema_version = 1


class MutantsSerializer(CsvSerializer):
    class Meta:
        fields = ("position", "wildtype", "mutant", "sequence", "predicted_fitness")
        schema_version = 1


class MutantCoordsSerializer(CsvSerializer):
    class Meta:
        fields = ("kind", "seed", "position", "sequence", "predicted_fitness", "pc1", "pc2")
        schema_version = 1


class WalksSerializer(CsvSerializer):
    class Meta:
        fields = ("representation", "step", "delta_fitness", "delta_sequence")
        schema_version = 1


def _default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError("{!r} is not JSON serializable".format(type(value).__name__))


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_default)
        fh.write("\n")
    return path


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise ValidationError("{} is not valid JSON: {}".format(path, e))
