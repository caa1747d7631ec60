"""
Hiérarchie d'exceptions du pipeline uniprofile
"""

from typing import Optional


class UniprofileError(Exception):
    """Erreur de base du projet"""


class ParseError(UniprofileError, ValueError):
    """Ligne illisible dans un fichier d'événements"""

    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"ligne {line_number} : {message}")


class ValidationError(UniprofileError, ValueError):
    """Enregistrement qui viole un invariant de champ"""

    def __init__(self, field: str, message: str, line_number: Optional[int] = None):
        self.field = field
        self.line_number = line_number
        prefix = f"ligne {line_number}, " if line_number is not None else ""
        super().__init__(f"{prefix}champ '{field}' : {message}")


class RangeError(UniprofileError, ValueError):
    """Valeur hors de la plage autorisée"""


class IdRangeError(UniprofileError, IndexError):
    """Identifiant hors du vocabulaire ou de la couche de sortie"""


class SchemaError(UniprofileError, ValueError):
    """Champ, tâche ou cible inconnu"""


class ShapeError(UniprofileError, ValueError):
    """Dimensions incompatibles"""


class ContractError(UniprofileError, ValueError):
    """Pré-condition d'appel non respectée"""


class ParameterError(UniprofileError, ValueError):
    """Hyperparamètre invalide"""


class ConfigurationError(UniprofileError, ValueError):
    """Configuration incohérente ou incomplète"""


class NumericError(UniprofileError, ArithmeticError):
    """Système linéaire singulier ou calcul non fini"""


class TrainingError(UniprofileError, RuntimeError):
    """Entraînement interrompu (perte ou gradient non fini)"""


class StageError(UniprofileError, RuntimeError):
    """Échec d'une étape du pipeline"""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"étape '{stage}' : {cause}")
