from django import forms
from django.core.exceptions import ValidationError


def _check_matrix(value, rows, cols, label):
    """Validates a nested list of numbers with the given shape."""
    if cols is None:
        ok = isinstance(value, list) and len(value) == rows and all(isinstance(x, (int, float)) for x in value)
    else:
        ok = (
            isinstance(value, list) and len(value) == rows
            and all(isinstance(row, list) and len(row) == cols for row in value)
            and all(isinstance(x, (int, float)) for row in value for x in row)
        )
    if not ok:
        shape = f"{rows}x{cols}" if cols else f"{rows}-vector"
        raise ValidationError(f"{label} must be a {shape} of numbers.")
    return value


class CameraForm(forms.Form):
    """Validates one camera entry of a scene manifest."""
    id = forms.CharField(max_length=64)
    fx = forms.FloatField(min_value=0.0)
    fy = forms.FloatField(min_value=0.0)
    cx = forms.FloatField()
    cy = forms.FloatField()
    width = forms.IntegerField(min_value=1)
    height = forms.IntegerField(min_value=1)
    rotation = forms.JSONField()
    translation = forms.JSONField()

    def clean_rotation(self):
        return _check_matrix(self.cleaned_data['rotation'], 3, 3, 'rotation')

    def clean_translation(self):
        return _check_matrix(self.cleaned_data['translation'], 3, None, 'translation')

    def clean(self):
        """Rejects zero focal lengths.

        Returns:
            dict: The cleaned data.

        Raises:
            ValidationError: If a focal length is zero.
        """
        cleaned_data = super().clean()
        for key in ('fx', 'fy'):
            if cleaned_data.get(key) == 0:
                raise ValidationError(f"{key} must be positive.")
        return cleaned_data


class FrameForm(forms.Form):
    """Validates one frame entry: camera id, normalized time and file paths."""
    camera = forms.CharField(max_length=64)
    time = forms.FloatField(min_value=0.0, max_value=1.0)
    image = forms.CharField()
    mask = forms.CharField(required=False)


def form_errors(form, location):
    """Flattens a bound form's errors into one location-prefixed message."""
    messages = []
    for name, errors in form.errors.items():
        where = location if name == '__all__' else f"{location}.{name}"
        messages.extend(f"{where}: {error}" for error in errors)
    return '; '.join(messages)
