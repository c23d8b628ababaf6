from typing import Any, List, Optional

from django import forms
from django.core.exceptions import ValidationError

from clientdata.models import PARTITION_KINDS
from federation.models import WEIGHTINGS


class IntListField(forms.Field):
    """A JSON list of integers, each at least ``min_value``."""

    def __init__(
        self, *, min_value: Optional[int] = None, max_value: Optional[int] = None, **kwargs
    ):
        self.min_value = min_value
        self.max_value = max_value
        super().__init__(**kwargs)

    def to_python(self, value: Any) -> Optional[List[int]]:
        if value in self.empty_values:
            return None
        if not isinstance(value, (list, tuple)):
            raise ValidationError("Enter a list of whole numbers.", code="invalid")
        out = []
        for item in value:
            if isinstance(item, bool) or not isinstance(item, int):
                raise ValidationError(f"{item!r} is not a whole number.", code="invalid")
            if self.min_value is not None and item < self.min_value:
                raise ValidationError(f"Every entry must be at least {self.min_value}.")
            if self.max_value is not None and item > self.max_value:
                raise ValidationError(f"Every entry must be at most {self.max_value}.")
            out.append(item)
        return out


def _positive(value: float):
    if not value > 0:
        raise ValidationError("Ensure this value is greater than 0.")


def _fraction(value: float):
    if not 0 < value <= 1:
        raise ValidationError("Ensure this value is in (0, 1].")


def _unit(value: Optional[float]):
    if value is not None and not 0 <= value <= 1:
        raise ValidationError("Ensure this value is in [0, 1].")


class ExperimentForm(forms.Form):
    seed = forms.IntegerField(min_value=0, max_value=2 ** 63 - 1)
    out_dir = forms.CharField()


# -- DATASET --
class DatasetForm(forms.Form):
    source = forms.ChoiceField(choices=[("synthetic", "synthetic"), ("csv", "csv")])
    csv_path = forms.CharField(required=False, empty_value=None)
    subsample_fraction = forms.FloatField(validators=[_fraction])

    def clean(self):
        cleaned = super().clean()
        if cleaned.get("source") == "csv" and not cleaned.get("csv_path"):
            raise ValidationError("source 'csv' needs csv_path")
        return cleaned


class SyntheticForm(forms.Form):
    clusters = forms.IntegerField(min_value=1)
    classes = forms.IntegerField(min_value=2)
    dim = forms.IntegerField(min_value=1)
    samples_per_class = forms.IntegerField(min_value=1)
    separation = forms.FloatField(min_value=0)
    permute_labels = forms.BooleanField(required=False)
    groups_per_cluster = forms.IntegerField(min_value=1)


# -- PARTITION --
class PartitionForm(forms.Form):
    kind = forms.ChoiceField(choices=[(k, k) for k in PARTITION_KINDS])
    clients = forms.IntegerField(min_value=1)
    alpha = forms.FloatField(validators=[_positive])
    min_per_client = forms.IntegerField(min_value=1)
    max_retries = forms.IntegerField(min_value=0)


# -- MODEL --
class ArchitectureForm(forms.Form):
    hidden_widths = IntListField(min_value=1)
    rank = forms.IntegerField(min_value=1)
    psi = IntListField(required=False, min_value=0, max_value=1)
    pretrain_epochs = forms.IntegerField(min_value=0)
    pretrain_learning_rate = forms.FloatField(min_value=0)
    base_checkpoint = forms.CharField(required=False, empty_value=None)

    def clean(self):
        cleaned = super().clean()
        widths, rank, psi = (
            cleaned.get("hidden_widths"),
            cleaned.get("rank"),
            cleaned.get("psi"),
        )
        if widths is not None and rank is not None and rank > min(widths):
            self.add_error("rank", f"Rank {rank} exceeds the narrowest hidden width {min(widths)}.")
        if widths is not None and psi is not None:
            if len(psi) != len(widths):
                self.add_error("psi", f"Needs one flag per layer ({len(widths)}), got {len(psi)}.")
            elif not any(psi):
                self.add_error("psi", "At least one layer must be selected.")
        return cleaned


# -- TRAINING --
class TrainingForm(forms.Form):
    rounds = forms.IntegerField(min_value=0)
    local_epochs = forms.IntegerField(min_value=1)
    learning_rate = forms.FloatField(min_value=0)
    batch_size = forms.IntegerField(min_value=1)
    workers = forms.IntegerField(min_value=1)


# -- STRATEGY --
class StrategyForm(forms.Form):
    name = forms.CharField()
    lam = forms.FloatField(required=False, validators=[_unit])
    epsilon = forms.FloatField(required=False, validators=[_positive])
    mu = forms.FloatField(required=False, min_value=0)
    apfl_alpha = forms.FloatField(required=False, validators=[_unit])
    apfl_adaptive = forms.NullBooleanField(required=False)
    share_head = forms.NullBooleanField(required=False)
    weighting = forms.TypedChoiceField(
        required=False, choices=[(w, w) for w in WEIGHTINGS], empty_value=None
    )
