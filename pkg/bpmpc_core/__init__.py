"""bpmpc core package."""
