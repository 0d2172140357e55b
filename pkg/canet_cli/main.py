#!/usr/bin/env python3
"""
CANet Restoration CLI
=====================

Outil en ligne de commande pour dégrader, entraîner, restaurer et évaluer
des images avec un réseau de restauration à attention (CANet).

Utilisation:
    canet-cli <commande> [options]

Commandes disponibles:
    degrade     Appliquer un bruit gaussien ou une compression JPEG
    train       Entraîner un modèle (ou lancer une ablation)
    restore     Restaurer une image avec un checkpoint
    eval        Mesurer PSNR/SSIM d'un checkpoint sur un répertoire
    gradcheck   Vérifier les gradients par différences finies
    params      Compter les paramètres d'une configuration

Variable d'environnement:
    CANET_LOG_LEVEL   Niveau de journalisation (défaut: WARNING)
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from canet_cli import __version__
from canet_cli.canet import load_checkpoint, network_gradient_check, read_checkpoint, restore_image
from canet_cli.errors import CanetError, ConfigError
from canet_cli.imaging import DegradationTask, load_image_dir, quantize, read_ppm, write_ppm
from canet_cli.metrics import psnr
from canet_cli.trainer import ABLATIONS, evaluate, load_config, run_ablation, train

LOG_LEVEL_ENV = "CANET_LOG_LEVEL"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


def configure_logging() -> None:
    """Configure la journalisation depuis CANET_LOG_LEVEL"""
    name = os.environ.get(LOG_LEVEL_ENV, "WARNING").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT)


class UsageError(Exception):
    """Erreur d'utilisation détectée par argparse"""

    def __init__(self, message: str, usage: str):
        super().__init__(message)
        self.usage = usage


class CanetArgumentParser(argparse.ArgumentParser):
    """ArgumentParser qui signale les erreurs d'utilisation au lieu de quitter"""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message, self.format_usage())


class CanetCLI:
    """Interface en ligne de commande pour la restauration d'images"""

    def __init__(self):
        self.parser = self._create_parser()

    def _create_parser(self) -> argparse.ArgumentParser:
        """Crée le parser principal avec tous les sous-parsers"""
        parser = CanetArgumentParser(
            prog="canet-cli",
            description="Restauration d'images (débruitage, réduction d'artefacts JPEG) par réseau à attention",
            formatter_class=argparse.RawDescriptionHelpFormatter,
            epilog="""
Exemples d'utilisation:
  %(prog)s degrade --task awgn --sigma 50 --in a.ppm --out b.ppm --seed 7
  %(prog)s train --config tiny --data images/ --steps 200 --checkpoint runs/tiny
  %(prog)s restore --checkpoint runs/tiny/best.cant --in b.ppm --out c.ppm
  %(prog)s eval --checkpoint runs/tiny/best.cant --data test/ --report report.json
  %(prog)s gradcheck --config tiny
  %(prog)s params --config default
            """
        )

        parser.add_argument(
            "--version", "-v",
            action="version",
            version=f"%(prog)s {__version__}"
        )

        parser.add_argument(
            "--json", "-j",
            action="store_true",
            help="Sortie au format JSON"
        )

        subparsers = parser.add_subparsers(
            dest="command",
            title="Commandes",
            description="Commandes disponibles"
        )

        # Sous-parser: degrade
        degrade_parser = subparsers.add_parser("degrade", help="Appliquer une dégradation synthétique")
        self._add_task_arguments(degrade_parser, default_task="awgn")
        degrade_parser.add_argument("--in", dest="input", required=True, help="Image propre (PPM/PGM)")
        degrade_parser.add_argument("--out", dest="output", required=True, help="Image dégradée à écrire")
        degrade_parser.add_argument("--seed", type=int, default=0, help="Graine du bruit (défaut: 0)")

        # Sous-parser: train
        train_parser = subparsers.add_parser("train", help="Entraîner un modèle")
        train_parser.add_argument(
            "--config", "-c",
            type=str,
            default="default",
            help="Préréglage (default, tiny) ou fichier JSON de configuration"
        )
        train_parser.add_argument("--data", required=True, help="Répertoire d'images propres d'entraînement")
        train_parser.add_argument("--eval-data", help="Répertoire d'images d'évaluation périodique")
        train_parser.add_argument("--steps", type=int, help="Nombre de pas d'Adam")
        train_parser.add_argument("--seed", type=int, help="Graine globale")
        self._add_task_arguments(train_parser, default_task=None)
        train_parser.add_argument("--lr", type=float, help="Taux d'apprentissage")
        train_parser.add_argument("--batch-size", type=int, help="Taille du batch")
        train_parser.add_argument("--checkpoint", help="Répertoire des checkpoints et du journal")
        train_parser.add_argument(
            "--ablation",
            choices=ABLATIONS,
            help="Lancer le protocole de sur-apprentissage sur chaque variante d'ablation"
        )

        # Sous-parser: restore
        restore_parser = subparsers.add_parser("restore", help="Restaurer une image")
        restore_parser.add_argument("--checkpoint", required=True, help="Fichier checkpoint (.cant)")
        restore_parser.add_argument("--in", dest="input", required=True, help="Image dégradée (PPM/PGM)")
        restore_parser.add_argument("--out", dest="output", required=True, help="Image restaurée à écrire")
        self._add_tile_arguments(restore_parser)

        # Sous-parser: eval
        eval_parser = subparsers.add_parser("eval", help="Évaluer un checkpoint")
        eval_parser.add_argument("--checkpoint", required=True, help="Fichier checkpoint (.cant)")
        eval_parser.add_argument("--data", required=True, help="Répertoire d'images propres")
        self._add_task_arguments(eval_parser, default_task=None)
        eval_parser.add_argument("--seed", type=int, default=0, help="Graine de dégradation (défaut: 0)")
        self._add_tile_arguments(eval_parser)
        eval_parser.add_argument("--report", help="Fichier JSON du rapport détaillé")

        # Sous-parser: gradcheck
        grad_parser = subparsers.add_parser("gradcheck", help="Vérifier les gradients du réseau")
        grad_parser.add_argument("--config", "-c", default="tiny", help="Préréglage ou fichier JSON (défaut: tiny)")
        grad_parser.add_argument("--seed", type=int, default=0, help="Graine (défaut: 0)")
        grad_parser.add_argument("--size", type=int, default=8, help="Côté de l'entrée de test (défaut: 8)")
        grad_parser.add_argument("--step", type=float, default=1e-6, help="Pas des différences finies")
        grad_parser.add_argument("--samples", type=int, default=5, help="Entrées tirées par paramètre")
        grad_parser.add_argument("--threshold", type=float, default=1e-4, help="Erreur relative maximale admise")

        # Sous-parser: params
        params_parser = subparsers.add_parser("params", help="Compter les paramètres")
        params_parser.add_argument("--config", "-c", default="default", help="Préréglage ou fichier JSON")

        return parser

    @staticmethod
    def _add_task_arguments(parser: argparse.ArgumentParser, default_task: Optional[str]) -> None:
        parser.add_argument("--task", choices=["awgn", "jpeg"], default=default_task, help="Type de dégradation")
        parser.add_argument("--sigma", type=float, help="Écart-type du bruit gaussien (défaut: 25)")
        parser.add_argument("--quality", type=int, help="Qualité JPEG 1-100 (défaut: 10)")
        parser.add_argument("--no-subsample", action="store_true", help="Désactiver le sous-échantillonnage 4:2:0")

    @staticmethod
    def _add_tile_arguments(parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--tile", type=int, default=48, help="Côté des tuiles (défaut: 48)")
        parser.add_argument("--overlap", type=int, default=8, help="Recouvrement des tuiles (défaut: 8)")
        parser.add_argument("--workers", type=int, default=1, help="Threads d'inférence (défaut: 1)")

    def run(self, args: Optional[List[str]] = None) -> int:
        """Exécute la commande CLI"""
        try:
            parsed_args = self.parser.parse_args(args)
        except UsageError as e:
            print(f"Erreur: {e}", file=sys.stderr)
            print(e.usage, file=sys.stderr, end="")
            return EXIT_USAGE
        except SystemExit as e:
            return int(e.code or 0)

        if not parsed_args.command:
            self.parser.print_help()
            return EXIT_USAGE

        handlers = {
            "degrade": self._degrade,
            "train": self._train,
            "restore": self._restore,
            "eval": self._eval,
            "gradcheck": self._gradcheck,
            "params": self._params,
        }
        try:
            return handlers[parsed_args.command](parsed_args)
        except (CanetError, OSError) as e:
            self._error(str(e), parsed_args.json)
            return EXIT_RUNTIME

    def _output(self, data: Dict[str, Any], as_json: bool = False) -> None:
        """Affiche le résultat"""
        if as_json:
            print(json.dumps(data, indent=2, ensure_ascii=False))
        else:
            for key, value in data.items():
                print(f"{key}: {value}")

    def _error(self, message: str, as_json: bool = False) -> None:
        """Affiche une erreur"""
        if as_json:
            print(json.dumps({"error": message}, indent=2, ensure_ascii=False), file=sys.stderr)
        else:
            print(f"Erreur: {message}", file=sys.stderr)

    @staticmethod
    def _task(args, fallback: Optional[DegradationTask] = None) -> Optional[DegradationTask]:
        """Tâche décrite par les options, complétée par `fallback`"""
        kind = args.task or (fallback.kind if fallback is not None else None)
        if kind is None:
            return None
        base = fallback if fallback is not None and fallback.kind == kind else DegradationTask(kind=kind)
        return DegradationTask(
            kind=kind,
            sigma=base.sigma if args.sigma is None else args.sigma,
            quality=base.quality if args.quality is None else args.quality,
            subsample=base.subsample and not args.no_subsample,
        )

    def _degrade(self, args) -> int:
        """Dégrade une image"""
        task = self._task(args)
        task.check()
        clean = read_ppm(args.input)
        degraded = quantize(task.apply(clean, args.seed))
        write_ppm(degraded, args.output)
        self._output({
            "input": args.input,
            "output": args.output,
            "task": task.describe(),
            "seed": args.seed,
            "psnr": round(psnr(degraded, clean), 4),
        }, args.json)
        return EXIT_OK

    def _train(self, args) -> int:
        """Entraîne un modèle ou lance une ablation"""
        cfg = load_config(args.config)
        task = self._task(args, cfg.degradation())
        cfg = cfg.with_overrides(
            steps=args.steps,
            seed=args.seed,
            lr=args.lr,
            batch_size=args.batch_size,
            checkpoint_dir=args.checkpoint,
            eval_data=args.eval_data,
        )
        cfg = cfg.with_overrides(task=task.kind, sigma=task.sigma, quality=task.quality, subsample=task.subsample)
        cfg.check()

        if args.ablation:
            images = load_image_dir(args.data)
            if not images:
                raise ConfigError(f"Aucune image PPM/PGM dans {args.data}")
            records = run_ablation(
                args.ablation, images[0][1], steps=cfg.steps, lr=cfg.lr, seed=cfg.seed,
                base=cfg.model, task=cfg.degradation(),
            )
            if args.json:
                self._output({"ablation": args.ablation, "variants": [r.to_dict() for r in records]}, True)
            else:
                print(f"\n{'=' * 60}")
                print(f"Ablation {args.ablation} ({cfg.steps} pas, {task.describe()})")
                print(f"{'=' * 60}")
                for r in records:
                    print(f"{r.name:20} params={r.params:8d} perte {r.initial_loss:.4g} -> {r.final_loss:.4g} "
                          f"psnr {r.noisy_psnr:.2f} -> {r.restored_psnr:.2f} dB")
            return EXIT_OK

        trained, log = train(args.data, cfg)
        self._output({
            "steps": cfg.steps,
            "params": trained.params.count(),
            "initial_loss": log.initial_loss,
            "final_loss": log.final_loss,
            "best_psnr": trained.best_psnr,
            "checkpoint": None if trained.checkpoint is None else str(trained.checkpoint),
            "wall_time": round(log.wall_time, 2),
        }, args.json)
        return EXIT_OK

    def _restore(self, args) -> int:
        """Restaure une image"""
        params, config = load_checkpoint(args.checkpoint)
        restored = restore_image(read_ppm(args.input), params, config, args.tile, args.overlap, args.workers)
        write_ppm(restored, args.output)
        self._output({
            "input": args.input,
            "output": args.output,
            "size": f"{restored.width}x{restored.height}",
        }, args.json)
        return EXIT_OK

    def _eval(self, args) -> int:
        """Évalue un checkpoint"""
        trained = read_checkpoint(args.checkpoint).task()
        task = self._task(args, trained or DegradationTask())
        report = evaluate(
            args.checkpoint, args.data, task, seed=args.seed,
            tile=args.tile, overlap=args.overlap, workers=args.workers,
        )
        if args.report:
            payload = {"summary": report.summary(), "images": report.to_records()}
            Path(args.report).write_text(json.dumps(payload, indent=2, ensure_ascii=False), encoding="utf-8")
        if not args.json:
            for line in report.to_lines():
                print(line)
        self._output(report.summary(), args.json)
        return EXIT_OK

    def _gradcheck(self, args) -> int:
        """Vérifie les gradients"""
        model = load_config(args.config).model
        error = network_gradient_check(model, seed=args.seed, size=args.size, step=args.step, samples=args.samples)
        passed = error <= args.threshold
        self._output({
            "config": args.config,
            "params": model.param_count(),
            "max_relative_error": error,
            "threshold": args.threshold,
            "passed": passed,
        }, args.json)
        return EXIT_OK if passed else EXIT_RUNTIME

    def _params(self, args) -> int:
        """Compte les paramètres"""
        model = load_config(args.config).model
        self._output({"config": args.config, "params": model.param_count()}, args.json)
        return EXIT_OK


def main():
    """Point d'entrée principal."""
    configure_logging()
    cli = CanetCLI()
    sys.exit(cli.run())


if __name__ == "__main__":
    main()
