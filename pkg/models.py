"""
Run registry tables (SQLAlchemy + SQLite).

Every executed run is stored with its full configuration and the per-round
trace rows, so reports can be built from the registry as well as from CSV.
"""
from sqlalchemy import Boolean, Column, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import declarative_base, relationship

Base = declarative_base()


class RunRecord(Base):
    """One (algorithm, gamma, seed) run of an experiment."""
    __tablename__ = "runs"

    run_id        = Column(String,  primary_key=True)   # "<experiment>/<trace file stem>"
    experiment    = Column(String,  nullable=False, index=True)
    algorithm     = Column(String,  nullable=False)
    gamma         = Column(Float,   nullable=False, default=0.0)
    seed          = Column(Integer, nullable=False)
    rounds        = Column(Integer, nullable=False)
    config_json   = Column(Text,    nullable=False)
    config_digest = Column(String,  nullable=False)
    trace_path    = Column(String,  default="")
    final_rolling_acc = Column(Float, nullable=True)
    rise_time     = Column(Integer, nullable=True)

    rows = relationship(
        "RoundRecord", back_populates="run",
        cascade="all, delete-orphan", order_by="RoundRecord.round",
    )


class RoundRecord(Base):
    """One trace row; NULL marks a diagnostic that was not evaluated."""
    __tablename__ = "rounds"

    run_id  = Column(String, ForeignKey("runs.run_id"), primary_key=True)
    round   = Column(Integer, primary_key=True)

    train_loss       = Column(Float)
    test_acc         = Column(Float)
    rolling_acc      = Column(Float)
    grad_norm_F      = Column(Float)
    grad_norm_Ftilde = Column(Float)
    xi_sq            = Column(Float)
    G_sq             = Column(Float)
    Ec_drift         = Column(Float)
    E0_drift         = Column(Float)
    Ftilde           = Column(Float)
    test_loss        = Column(Float)
    train_acc        = Column(Float)
    delta_norm       = Column(Float)
    grad_norm_f0     = Column(Float)
    params_digest    = Column(String, default="")
    drift_estimated  = Column(Boolean, default=False)

    run = relationship("RunRecord", back_populates="rows")
