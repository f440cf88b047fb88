"""Producer and consumer agents that exercise the full telemetry flow."""
