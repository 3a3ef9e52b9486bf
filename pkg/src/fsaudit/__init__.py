"""User-level membership auditing for few-shot face recognition."""
