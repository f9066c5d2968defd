from typing import Literal

Type_Mode = Literal["analytic", "simulate", "sweep", "compare", "quarantine-demo"]
Type_Opinion = Literal["Unknown", "Liked", "Disliked"]
Type_Outcome = Literal["Pending", "AdmittedDirect", "AdmittedByResolver", "Rejected"]
