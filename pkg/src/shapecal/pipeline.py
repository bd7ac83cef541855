"""Calibration pipeline: declarative config, file-backed stages and a run manifest.

Stages and their files (relative to the output directory)::

    generate-obs     observation.json, observation.provenance.json
    design-eval      training.csv
    fit-gp           gp.json
    smc              particles.csv, smc_trace.json
    analyze          analysis/*
    gp-convergence   convergence_design.csv, gp_convergence.csv

Every stage records a hash of its inputs (config blocks plus upstream files)
in ``manifest.json`` and is skipped when that hash and its outputs are
unchanged.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis
from .discrepancy import DiscrepancyConfig, DiscrepancyError, discrepancy, n_terms_for
from .forward import (BendingBumpModel, ForwardModelError, ModelParams, SubprocessForwardModel,
                      UncertainConditions)
from .geometry import GeometryError, InterfaceMesh, MeasurementSpec, compute_frames, measurement_spec_from_mesh
from .likelihood import LikelihoodConfig, ObservationError, generate_observation, log_likelihood, write_observation
from .parameter_space import ParameterBox, Prior, PriorError, design_to_box, distribution_from_dict, sobol_points
from .smc import SMCConfig, SMCError, run_smc
from .surrogate import GPModel, SurrogateError, TrainingSet, fit_gp, test_error

log = logging.getLogger(__name__)

STAGES = ("generate-obs", "design-eval", "fit-gp", "smc", "analyze", "gp-convergence")

DEFAULT_CONFIG = {
    "forward": {"model": "bending_bump", "radius": 0.25, "n_seg": 64, "kappa": 0.5, "beta": 0.3,
                "amplitude": 0.92, "u_max": 0.15},
    "observation": {"E": [400.0], "nu": [0.3], "v_in": 100.0, "sigma_obs": 0.0, "seed": 0},
    "discrepancy": {"measure": "rkhs_sc", "sigma_w": 0.005, "normal_weighting": "segment_length",
                    "measurement_spec": None, "n_measurement_points": 10},
    "likelihood": {"variance": 0.0005, "n_terms": "auto"},
    "priors": [
        {"name": "E_1", "kind": "uniform", "lo": 100.0, "hi": 800.0},
        {"name": "nu_1", "kind": "uniform", "lo": -0.8, "hi": 0.5},
    ],
    "box": None,
    "conditions": {"v_in": None},
    "design": {"n_train": 200, "skip": 1},
    "gp": {"kernel": "matern32", "restarts": 5, "seed": 0, "maxiter": 200},
    "smc": {"n_particles": 5000, "zeta": 0.995, "ess_min_fraction": 0.5, "n_rejuvenation": 20, "seed": 0},
    "uncertainty": None,
    "analysis": {"map_bins": 30, "hist_bins": 30, "kde_mode": "loo_grid", "kde_points": 200,
                 "laplace": True, "fd_step": 1e-4},
    "gp_convergence": {"sizes": [10, 20, 50, 100, 200, 900], "n_test": 100},
    "output_dir": "out",
}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    pass


def _merge(default, override):
    if isinstance(default, dict) and isinstance(override, dict):
        out = dict(default)
        for k, v in override.items():
            out[k] = _merge(default.get(k), v) if k in default else v
        return out
    return copy.deepcopy(override)


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _fmt(v) -> str:
    return repr(float(v))


@dataclass
class PipelineConfig:
    """Validated run configuration.

    ``data`` is the full config document with defaults filled in;
    ``base_dir`` resolves relative paths inside it.
    """

    data: dict
    base_dir: Path = Path(".")

    def __post_init__(self):
        try:
            self._build()
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError, PriorError, ForwardModelError, DiscrepancyError,
                SMCError, GeometryError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def from_dict(cls, data: dict | None = None, base_dir=".") -> "PipelineConfig":
        unknown = set(data or {}) - set(DEFAULT_CONFIG)
        if unknown:
            raise ConfigError(f"unknown config blocks: {sorted(unknown)}")
        return cls(_merge(DEFAULT_CONFIG, data or {}), Path(base_dir))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data, path.parent)

    def with_seed(self, seed: int) -> "PipelineConfig":
        data = copy.deepcopy(self.data)
        for block in ("observation", "gp", "smc"):
            data[block]["seed"] = int(seed)
        return PipelineConfig(data, self.base_dir)

    def with_output(self, out_dir) -> "PipelineConfig":
        data = copy.deepcopy(self.data)
        data["output_dir"] = str(out_dir)
        return PipelineConfig(data, self.base_dir)

    def _build(self):
        d = self.data
        self.model = build_forward_model(d["forward"], self.base_dir)
        obs = d["observation"]
        self.params_gt = ModelParams(obs["E"], obs["nu"])
        self.theta_gt = UncertainConditions(float(obs["v_in"]))
        if float(obs["sigma_obs"]) < 0:
            raise ConfigError("observation.sigma_obs must be non-negative")
        disc = d["discrepancy"]
        self.discrepancy = DiscrepancyConfig(disc["measure"], float(disc["sigma_w"]), disc["normal_weighting"])

        self.prior = Prior.from_list(d["priors"])
        if self.prior.dim != 2 * self.params_gt.n_subdomains:
            raise ConfigError(f"{self.prior.dim} priors for {self.params_gt.n_subdomains} subdomain(s); "
                              "expected one E and one nu prior per subdomain")
        unc = d["uncertainty"]
        self.theta_prior = None
        if unc is not None:
            spec = dict(unc.get("theta_prior", unc))
            spec.setdefault("name", "v_in")
            self.theta_prior = Prior([distribution_from_dict(spec)], [spec["name"]])
        box = ParameterBox.from_list(d["box"]) if d["box"] is not None else self.prior.box()
        if box.dim != self.prior.dim:
            raise ConfigError("box dimension differs from the number of priors")
        self.box = box if self.theta_prior is None else box + self.theta_prior.box()
        self.full_prior = self.prior if self.theta_prior is None else self.prior + self.theta_prior
        v_in = d["conditions"]["v_in"]
        self.fixed_theta = UncertainConditions(float(obs["v_in"] if v_in is None else v_in))

        lik = d["likelihood"]
        if lik.get("sigma_n") is not None:
            self.sigma_n = float(lik["sigma_n"])
        else:
            self.sigma_n = math.sqrt(float(lik["variance"]))
        n_terms = lik.get("n_terms", "auto")
        if n_terms != "auto" and (not isinstance(n_terms, int) or n_terms < 1):
            raise ConfigError("likelihood.n_terms must be 'auto' or a positive integer")
        LikelihoodConfig(self.sigma_n, 1)

        design = d["design"]
        if int(design["n_train"]) < 2 or int(design["skip"]) < 0:
            raise ConfigError("design needs n_train >= 2 and skip >= 0")
        gp = d["gp"]
        if gp["kernel"] not in ("matern32", "ard"):
            raise ConfigError(f"unknown gp.kernel {gp['kernel']!r}")
        if int(gp["restarts"]) < 1:
            raise ConfigError("gp.restarts must be >= 1")
        s = d["smc"]
        self.smc = SMCConfig(int(s["n_particles"]), float(s["zeta"]), float(s["ess_min_fraction"]),
                             int(s["n_rejuvenation"]), s.get("proposal_scale_init"), int(s["seed"]))
        a = d["analysis"]
        if int(a["map_bins"]) < 2 or int(a["hist_bins"]) < 1:
            raise ConfigError("analysis bins out of range")
        if isinstance(a["kde_mode"], str) and a["kde_mode"] not in ("silverman", "loo_grid", "none"):
            raise ConfigError(f"unknown analysis.kde_mode {a['kde_mode']!r}")
        conv = d["gp_convergence"]
        if conv is not None and (not conv["sizes"] or min(conv["sizes"]) < 2 or int(conv["n_test"]) < 1):
            raise ConfigError("gp_convergence needs sizes >= 2 and n_test >= 1")
        spec_path = disc.get("measurement_spec")
        if spec_path is not None and not self.resolve(spec_path).exists():
            raise ConfigError(f"measurement spec {spec_path} does not exist")

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out_dir(self) -> Path:
        return self.resolve(self.data["output_dir"])

    @property
    def n_params(self) -> int:
        return self.prior.dim

    @property
    def names(self) -> list:
        return list(self.full_prior.names)

    def stage_inputs(self, stage: str) -> dict:
        """Config blocks that determine a stage's outputs."""
        d = self.data
        keys = {
            "generate-obs": ["forward", "observation"],
            "design-eval": ["forward", "discrepancy", "likelihood", "priors", "box", "conditions", "design",
                            "uncertainty"],
            "fit-gp": ["gp", "priors", "box", "uncertainty"],
            "smc": ["smc", "priors", "uncertainty"],
            "analyze": ["analysis", "priors", "box", "uncertainty"],
            "gp-convergence": ["forward", "discrepancy", "likelihood", "priors", "box", "conditions", "gp",
                               "uncertainty", "gp_convergence", "design"],
        }[stage]
        return {k: d[k] for k in keys}


def build_forward_model(block: dict, base_dir=Path(".")):
    block = dict(block)
    kind = block.pop("model", "bending_bump")
    if kind == "bending_bump":
        return BendingBumpModel(**{k: (int(v) if k == "n_seg" else float(v)) for k, v in block.items()})
    if kind == "subprocess":
        ref = Path(block["reference_mesh"])
        ref = ref if ref.is_absolute() else Path(base_dir) / ref
        return SubprocessForwardModel(list(block["command"]), InterfaceMesh.load(ref), block.get("timeout"))
    raise ConfigError(f"unknown forward model {kind!r}")


# --- point evaluation -------------------------------------------------------

class _Evaluator:
    """Forward run + discrepancy + log-likelihood for one design point."""

    def __init__(self, cfg: PipelineConfig, observed: InterfaceMesh):
        self.model = cfg.model
        self.n_params = cfg.n_params
        self.has_theta = cfg.theta_prior is not None
        self.fixed_theta = cfg.fixed_theta
        self.disc = cfg.discrepancy
        self.observed = observed
        self.obs_frames = compute_frames(observed)
        spec_path = cfg.data["discrepancy"].get("measurement_spec")
        if spec_path is not None:
            self.spec = MeasurementSpec.load(cfg.resolve(spec_path))
        else:
            self.spec = measurement_spec_from_mesh(observed, int(cfg.data["discrepancy"]["n_measurement_points"]))
        n_terms = cfg.data["likelihood"].get("n_terms", "auto")
        if n_terms == "auto":
            n_terms = n_terms_for(self.disc.measure, self.model.reference().n_nodes, self.spec.n_points)
        self.lik = LikelihoodConfig(cfg.sigma_n, int(n_terms))

    def __call__(self, x):
        """Return ``(D, log_lik, reason)``; failures have ``nan`` values and a reason."""
        x = np.asarray(x, dtype=float)
        try:
            params = ModelParams.from_vector(x[:self.n_params])
            theta = UncertainConditions(float(x[self.n_params])) if self.has_theta else self.fixed_theta
        except ForwardModelError as exc:
            return math.nan, math.nan, f"invalid parameters: {exc}"
        result = self.model.deform(params, theta)
        if not result.ok:
            return math.nan, math.nan, result.reason
        try:
            D = discrepancy(result.mesh, self.observed, self.disc, self.spec, self.obs_frames)
        except (GeometryError, DiscrepancyError) as exc:
            return math.nan, math.nan, f"discrepancy: {exc}"
        return D, log_likelihood(D, self.lik), ""


_WORKER = None


def _init_worker(data, base_dir, observed_dict):
    global _WORKER
    cfg = PipelineConfig(data, Path(base_dir))
    _WORKER = _Evaluator(cfg, InterfaceMesh.from_dict(observed_dict))


def _eval_in_worker(x):
    return _WORKER(x)


def evaluate_points(cfg: PipelineConfig, observed: InterfaceMesh, X, workers: int = 1) -> list:
    """Evaluate design rows; the result list is ordered by row regardless of ``workers``."""
    X = np.asarray(X, dtype=float)
    if workers <= 1 or len(X) < 2:
        ev = _Evaluator(cfg, observed)
        return [ev(x) for x in X]
    chunk = max(1, len(X) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                             initargs=(cfg.data, str(cfg.base_dir), observed.to_dict())) as pool:
        return list(pool.map(_eval_in_worker, list(X), chunksize=chunk))


def design_points(cfg: PipelineConfig, n: int) -> np.ndarray:
    return design_to_box(sobol_points(cfg.box.dim, n, int(cfg.data["design"]["skip"])), cfg.box)


# --- training CSV -----------------------------------------------------------

def write_training_csv(path, names, X, results) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(names) + ["D", "log_lik", "failed", "reason"])
        for x, (D, ll, reason) in zip(X, results):
            failed = not math.isfinite(ll)
            writer.writerow([_fmt(v) for v in x]
                            + (["", "", "1", reason] if failed else [_fmt(D), _fmt(ll), "0", ""]))


def read_training_csv(path):
    """Return ``(names, TrainingSet, D)`` from a training CSV; failed rows get ``nan``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    d = header.index("D")
    X = np.array([[float(v) for v in r[:d]] for r in rows]).reshape(len(rows), d)
    D = np.array([float(r[d]) if r[d] else math.nan for r in rows])
    ll = np.array([float(r[d + 1]) if r[d + 1] else math.nan for r in rows])
    failed = np.array([r[d + 2] == "1" for r in rows], dtype=bool)
    return header[:d], TrainingSet(X, ll, failed), D


# --- manifest ---------------------------------------------------------------

class Manifest:
    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / "manifest.json"
        self.data = json.loads(self.path.read_text()) if self.path.exists() else {"stages": {}, "runs": []}

    def is_current(self, stage: str, input_hash: str) -> bool:
        entry = self.data["stages"].get(stage)
        if entry is None or entry["input_hash"] != input_hash:
            return False
        base = self.path.parent
        return all((base / rel).exists() and file_hash(base / rel) == h for rel, h in entry["outputs"].items())

    def record(self, stage: str, input_hash: str, outputs, wall_clock: float, seeds: dict) -> None:
        base = self.path.parent
        outs = {str(Path(p).relative_to(base)): file_hash(p) for p in sorted(map(str, outputs))}
        self.data["stages"][stage] = {"input_hash": input_hash, "outputs": outs,
                                      "wall_clock_s": round(wall_clock, 3), "seeds": seeds}
        self.data["runs"].append({"stage": stage, "input_hash": input_hash,
                                  "finished": time.strftime("%Y-%m-%dT%H:%M:%S")})
        self.path.write_text(json.dumps(self.data, indent=1))


# --- stages -----------------------------------------------------------------

class Pipeline:
    """Runs stages against one config and output directory."""

    def __init__(self, cfg: PipelineConfig, workers: int = 1, force: bool = False):
        self.cfg = cfg
        self.workers = max(1, int(workers))
        self.force = force
        self.out = cfg.out_dir
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = Manifest(self.out)

    def path(self, name) -> Path:
        return self.out / name

    def _require(self, name: str, stage: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise StageError(f"missing {p}; run the '{stage}' stage first")
        return p

    def _run(self, stage: str, upstream, body) -> bool:
        """Run ``body`` unless the manifest says the stage is current. Returns True if it ran."""
        h = hashlib.sha256(_canonical(self.cfg.stage_inputs(stage)))
        for p in upstream:
            h.update(file_hash(p).encode())
        input_hash = h.hexdigest()
        if not self.force and self.manifest.is_current(stage, input_hash):
            log.info("%s: up to date", stage)
            return False
        t0 = time.perf_counter()
        outputs = body()
        seeds = {b: self.cfg.data[b]["seed"] for b in ("observation", "gp", "smc")}
        self.manifest.record(stage, input_hash, outputs, time.perf_counter() - t0, seeds)
        log.info("%s: done in %.1f s", stage, time.perf_counter() - t0)
        return True

    def generate_obs(self) -> bool:
        def body():
            obs = self.cfg.data["observation"]
            try:
                mesh = generate_observation(self.cfg.params_gt, self.cfg.theta_gt, float(obs["sigma_obs"]),
                                            int(obs["seed"]), self.cfg.model)
            except ObservationError as exc:
                raise StageError(str(exc)) from exc
            sidecar = write_observation(mesh, self.path("observation.json"), self.cfg.params_gt,
                                        self.cfg.theta_gt, float(obs["sigma_obs"]), int(obs["seed"]))
            return [self.path("observation.json"), sidecar]
        return self._run("generate-obs", [], body)

    def _observed(self) -> InterfaceMesh:
        return InterfaceMesh.load(self._require("observation.json", "generate-obs"))

    def design_eval(self) -> bool:
        obs_path = self._require("observation.json", "generate-obs")

        def body():
            X = design_points(self.cfg, int(self.cfg.data["design"]["n_train"]))
            results = evaluate_points(self.cfg, self._observed(), X, self.workers)
            n_failed = sum(not math.isfinite(r[1]) for r in results)
            if n_failed == len(results):
                raise StageError("every forward evaluation of the design failed")
            if n_failed:
                log.warning("design-eval: %d of %d runs failed", n_failed, len(results))
            write_training_csv(self.path("training.csv"), self.cfg.names, X, results)
            return [self.path("training.csv")]
        return self._run("design-eval", [obs_path], body)

    def fit_gp(self) -> bool:
        train_path = self._require("training.csv", "design-eval")

        def body():
            _, train, _ = read_training_csv(train_path)
            gp = self.cfg.data["gp"]
            try:
                model = fit_gp(train, self.cfg.box, gp["kernel"], int(gp["restarts"]), int(gp["seed"]),
                               maxiter=int(gp.get("maxiter", 200)))
            except SurrogateError as exc:
                raise StageError(f"fit-gp: {exc}") from exc
            model.save(self.path("gp.json"))
            return [self.path("gp.json")]
        return self._run("fit-gp", [train_path], body)

    def smc(self) -> bool:
        gp_path = self._require("gp.json", "fit-gp")

        def body():
            model = GPModel.load(gp_path)
            try:
                particles, trace = run_smc(model.predict_mean, self.cfg.full_prior, self.cfg.smc, return_trace=True)
            except SMCError as exc:
                raise StageError(f"smc: {exc}") from exc
            analysis.write_particles_csv(self.path("particles.csv"), particles, self.cfg.n_params)
            self.path("smc_trace.json").write_text(json.dumps(trace.to_dict()))
            return [self.path("particles.csv"), self.path("smc_trace.json")]
        return self._run("smc", [gp_path], body)

    def analyze(self) -> bool:
        part_path = self._require("particles.csv", "smc")
        gp_path = self._require("gp.json", "fit-gp")

        def body():
            particles, n_params = analysis.read_particles_csv(part_path)
            a = self.cfg.data["analysis"]
            scores = particles.scores
            laplace = None
            if a["laplace"]:
                model = GPModel.load(gp_path)
                prior = self.cfg.full_prior

                def log_post(x):
                    return float(model.predict_mean(x[None, :])[0]) + prior.log_pdf(x)

                map_point = analysis.map_from_particles(particles.positions, scores)
                try:
                    mean, cov = analysis.laplace_approximation(log_post, map_point, float(a["fd_step"]),
                                                               self.cfg.box.width)
                    laplace = {"mean": mean.tolist(), "covariance": cov.tolist(), "names": self.cfg.names}
                except analysis.LaplaceError as exc:
                    laplace = {"error": str(exc)}
            kde = None if a["kde_mode"] == "none" else a["kde_mode"]
            try:
                files = analysis.export_tables(particles, scores, self.path("analysis"), n_params,
                                               self.cfg.names[:n_params], int(a["hist_bins"]),
                                               int(a["map_bins"]), kde_mode=kde, kde_points=int(a["kde_points"]),
                                               laplace=laplace)
            except analysis.AnalysisError as exc:
                raise StageError(f"analyze: {exc}") from exc
            return list(files.values())
        return self._run("analyze", [part_path, gp_path], body)

    def gp_convergence(self) -> bool:
        obs_path = self._require("observation.json", "generate-obs")
        conv = self.cfg.data["gp_convergence"]
        if conv is None:
            raise StageError("gp_convergence block is disabled in the config")

        def body():
            sizes = sorted(int(s) for s in conv["sizes"])
            n_test = int(conv["n_test"])
            X = design_points(self.cfg, sizes[-1] + n_test)
            results = evaluate_points(self.cfg, self._observed(), X, self.workers)
            write_training_csv(self.path("convergence_design.csv"), self.cfg.names, X, results)
            ll = np.array([r[1] for r in results])
            failed = ~np.isfinite(ll)
            full = TrainingSet(X, np.where(failed, np.nan, ll), failed)
            test = slice(sizes[-1], sizes[-1] + n_test)
            test_ok = ~failed[test]
            gp = self.cfg.data["gp"]
            rows = []
            for n in sizes:
                try:
                    model = fit_gp(full.subset(slice(0, n)), self.cfg.box, gp["kernel"], int(gp["restarts"]),
                                   int(gp["seed"]), maxiter=int(gp.get("maxiter", 200)))
                except SurrogateError as exc:
                    raise StageError(f"gp-convergence at n_train={n}: {exc}") from exc
                err = test_error(model, X[test][test_ok], ll[test][test_ok])
                rows.append((n, int(np.sum(~failed[:n])), int(np.sum(test_ok)), err))
            with open(self.path("gp_convergence.csv"), "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["n_train", "n_success", "n_test", "test_error"])
                for n, ns, nt, err in rows:
                    writer.writerow([n, ns, nt, _fmt(err)])
            return [self.path("convergence_design.csv"), self.path("gp_convergence.csv")]
        return self._run("gp-convergence", [obs_path], body)

    def run(self, stage: str) -> bool:
        fn = {"generate-obs": self.generate_obs, "design-eval": self.design_eval, "fit-gp": self.fit_gp,
              "smc": self.smc, "analyze": self.analyze, "gp-convergence": self.gp_convergence}[stage]
        return fn()

    def run_all(self) -> None:
        for stage in STAGES:
            if stage == "gp-convergence" and self.cfg.data["gp_convergence"] is None:
                continue
            self.run(stage)


def read_convergence_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([int(r["n_train"]) for r in rows]), np.array([float(r["test_error"]) for r in rows])
