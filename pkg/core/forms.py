"""
Run configuration for the keydisk commands.
Validates parameter ranges with a Django form and freezes the result.
"""
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from django import forms
from django.conf import settings
from django.core.exceptions import ValidationError

from encoding.targets import CentroidMode
from poses.decoder import SIGMA_HVK_RANGE, SIGMA_LVK_RANGE, PoseDecodeConfig
from scenes.generator import MIN_CANVAS
from segmentation.decoder import IGO_SIGMA_RANGE, SegDecodeConfig


class RunConfigForm(forms.Form):
    """
    Parameter ranges of every pipeline stage.
    """
    radius = forms.FloatField(label='Disk radius R')
    sigma_hvk = forms.FloatField(min_value=SIGMA_HVK_RANGE[0], label='High-variance sigma')
    sigma_lvk = forms.FloatField(min_value=SIGMA_LVK_RANGE[0], label='Low-variance sigma')
    sigma_instance = forms.FloatField(label='Instance sigma')
    igo_sigma = forms.FloatField(min_value=IGO_SIGMA_RANGE[0], max_value=IGO_SIGMA_RANGE[1])
    threshold = forms.FloatField()
    nms_radius = forms.FloatField(label='NMS radius')
    mode = forms.ChoiceField(choices=[(m.value, m.value) for m in CentroidMode])
    max_iters = forms.IntegerField(min_value=1)
    tol = forms.FloatField()
    canvas = forms.IntegerField(min_value=MIN_CANVAS)
    persons = forms.IntegerField(min_value=1)
    max_persons = forms.IntegerField(min_value=1, required=False)
    count = forms.IntegerField(min_value=1)
    occlude = forms.FloatField(min_value=0.0, max_value=1.0)
    seed = forms.IntegerField(min_value=0)
    noise = forms.FloatField(min_value=0.0)
    offset_noise = forms.FloatField(min_value=0.0)
    workers = forms.IntegerField(min_value=1)

    def _positive(self, name):
        value = self.cleaned_data.get(name)
        if value is not None and not value > 0:
            raise ValidationError(f'{name} must be positive.')
        return value

    def clean_radius(self):
        return self._positive('radius')

    def clean_sigma_instance(self):
        return self._positive('sigma_instance')

    def clean_nms_radius(self):
        return self._positive('nms_radius')

    def clean_tol(self):
        return self._positive('tol')

    def clean_sigma_hvk(self):
        value = self.cleaned_data.get('sigma_hvk')
        if value is not None and not value < SIGMA_HVK_RANGE[1]:
            raise ValidationError(f'sigma_hvk must be below {SIGMA_HVK_RANGE[1]}.')
        return value

    def clean_sigma_lvk(self):
        value = self.cleaned_data.get('sigma_lvk')
        if value is not None and not value < SIGMA_LVK_RANGE[1]:
            raise ValidationError(f'sigma_lvk must be below {SIGMA_LVK_RANGE[1]}.')
        return value

    def clean_threshold(self):
        value = self.cleaned_data.get('threshold')
        if value is not None and not 0.0 < value < 1.0:
            raise ValidationError('threshold must lie strictly between 0 and 1.')
        return value

    def clean(self):
        cleaned_data = super().clean()
        persons = cleaned_data.get('persons')
        max_persons = cleaned_data.get('max_persons')
        if persons and max_persons is not None and max_persons < persons:
            raise ValidationError('max_persons must not be below persons.')
        return cleaned_data


@dataclass(frozen=True)
class RunConfig:
    radius: float
    sigma_hvk: float
    sigma_lvk: float
    sigma_instance: float
    igo_sigma: float
    threshold: float
    nms_radius: float
    mode: str
    max_iters: int
    tol: float
    canvas: int
    persons: int
    max_persons: Optional[int]
    count: int
    occlude: float
    seed: int
    noise: float
    offset_noise: float
    workers: int

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def defaults(cls):
        return {name.lower(): value for name, value in settings.KEYDISK.items() if name.lower() in cls.field_names()}

    @classmethod
    def from_data(cls, data):
        """Validate a complete parameter dict through RunConfigForm."""
        unknown = sorted(set(data) - set(cls.field_names()))
        if unknown:
            raise ValidationError(f'unknown config keys: {", ".join(unknown)}')
        form = RunConfigForm(data)
        if not form.is_valid():
            raise ValidationError([
                f'{name}: {message}'
                for name, messages in form.errors.items()
                for message in messages
            ])
        return cls(**{name: form.cleaned_data[name] for name in cls.field_names()})

    @classmethod
    def resolve(cls, options=None, path=None):
        """
        Settings defaults, overridden by the ``path`` config file, overridden
        by every option that is not None.
        """
        data = cls.defaults()
        if path:
            data.update(cls.read(path))
        names = set(cls.field_names())
        data.update({k: v for k, v in (options or {}).items() if k in names and v is not None})
        return cls.from_data(data)

    @staticmethod
    def read(path):
        try:
            payload = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f'{path} is not valid JSON: {exc}') from exc
        if not isinstance(payload, dict):
            raise ValueError(f'{path} must hold a JSON object')
        return payload

    def serialize(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def parse(cls, text):
        return cls.from_data(json.loads(text))

    def save(self, path):
        Path(path).write_text(self.serialize())

    @classmethod
    def load(cls, path):
        return cls.from_data(cls.read(path))

    def replace(self, **changes):
        data = asdict(self)
        data.update(changes)
        return type(self).from_data(data)

    @property
    def person_range(self):
        if self.max_persons is None or self.max_persons == self.persons:
            return self.persons
        return (self.persons, self.max_persons)

    def pose_config(self, **overrides):
        config = PoseDecodeConfig(
            radius=self.radius,
            sigma_hvk=self.sigma_hvk,
            sigma_lvk=self.sigma_lvk,
            threshold=self.threshold,
            nms_radius=self.nms_radius,
            workers=self.workers,
        )
        return PoseDecodeConfig(**{**asdict(config), **overrides})

    def seg_config(self, **overrides):
        config = SegDecodeConfig(
            mode=self.mode,
            sigma_j=self.sigma_instance,
            igo_sigma=self.igo_sigma,
            max_iters=self.max_iters,
            tol=self.tol,
            workers=self.workers,
        )
        return SegDecodeConfig(**{**asdict(config), **overrides})
