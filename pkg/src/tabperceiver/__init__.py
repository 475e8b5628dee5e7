"""TabPerceiver."""
