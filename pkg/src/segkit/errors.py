class ConfigError(ValueError):
    """Invalid configuration value or network specification."""
