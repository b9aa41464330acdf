import math

from relso.exceptions import ValidationError


class SequenceValidator:
    def __init__(self, alphabet, **kwargs):
        self.alphabet = alphabet
        self.max_len = kwargs.pop("max_len", None)
        self.allow_empty = kwargs.pop("allow_empty", False)

    def __call__(self, value, row=None):
        errors = []
        if not isinstance(value, str):
            raise ValidationError("sequence must be text, got {!r}".format(value), row=row)
        value = value.strip()

        if not value and not self.allow_empty:
            errors.append("empty sequence")
        unknown = sorted({symbol for symbol in value if symbol not in self.alphabet.residues})
        if unknown:
            errors.append("unknown symbol(s) {}".format(", ".join(repr(s) for s in unknown)))
        if self.max_len is not None and len(value) > self.max_len:
            errors.append("sequence length {} exceeds max_len {}".format(len(value), self.max_len))
        if errors:
            raise ValidationError("; ".join(errors), row=row)
        return value


class FitnessValidator:
    def __call__(self, value, row=None):
        try:
            fitness = float(value)
        except (TypeError, ValueError):
            raise ValidationError("non-numeric fitness {!r}".format(value), row=row)
        if not math.isfinite(fitness):
            raise ValidationError("fitness must be finite, got {!r}".format(value), row=row)
        return fitness
