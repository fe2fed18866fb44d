"""Exception hierarchy.

Everything raised on purpose derives from :class:`RuleStateError` so callers
(and the CLI) can separate input problems from bugs.
"""


class RuleStateError(Exception):
    pass


class DomainError(RuleStateError, ValueError):
    """A signal value lies outside its link's open domain."""

    def __init__(self, message, entity_id=None, rule_id=None):
        if entity_id is not None or rule_id is not None:
            message = f"{message} (entity={entity_id}, rule={rule_id})"
        super().__init__(message)
        self.entity_id = entity_id
        self.rule_id = rule_id


class UnsupportedLink(RuleStateError, ValueError):
    pass


class NonFinite(RuleStateError, ValueError):
    pass


class InvalidCounts(RuleStateError, ValueError):
    pass


class ParseError(RuleStateError, ValueError):
    """Malformed document. ``path`` names the offending field."""

    def __init__(self, message, path=None, source=None, line=None):
        where = []
        if source is not None:
            where.append(str(source) if line is None else f"{source}:{line}")
        if path:
            where.append(path)
        if where:
            message = f"{' '.join(where)}: {message}"
        super().__init__(message)
        self.path = path
        self.source = source
        self.line = line


class ValidationError(ParseError):
    pass


class MissingAttribute(RuleStateError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "missing attribute"


class ConfigError(RuleStateError, ValueError):
    pass


class EmptyRuleSet(ConfigError):
    pass


class InnerLoopDivergence(RuleStateError, RuntimeError):
    pass


class NonFiniteState(RuleStateError, FloatingPointError):
    """A NaN or infinity appeared in the variational state; carries a dump."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump


class UnknownRule(RuleStateError, KeyError):
    def __str__(self):
        return f"unknown rule: {self.args[0]}" if self.args else "unknown rule"


class NoApplicableRules(RuleStateError, ValueError):
    pass


class EmptyPeriodSequence(RuleStateError, ValueError):
    pass


class NoObservations(RuleStateError, ValueError):
    pass


class InsufficientData(RuleStateError, ValueError):
    pass


class UnknownExperiment(RuleStateError, ValueError):
    pass
