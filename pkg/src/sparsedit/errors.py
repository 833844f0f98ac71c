"""Exception types shared across the engine."""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its contract."""


class ConfigError(ValueError):
    """A configuration value is outside its allowed range."""


class CacheMissError(KeyError):
    """A required cache entry is absent.

    Carries the (step, layer_id, role) triple so pipeline failures name the
    exact missing activation.
    """

    def __init__(self, step, layer_id, role):
        self.step = step
        self.layer_id = layer_id
        self.role = role
        super().__init__(f"cache miss: step={step} layer={layer_id} role={role}")
