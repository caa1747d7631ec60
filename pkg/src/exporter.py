"""
Module d'export : fichiers de profils .uemb, TSV et rapports d'évaluation
"""

import json
import logging
import struct
from pathlib import Path
from typing import Dict, List

import numpy as np
import pandas as pd

from ensemble import ProfileMatrix
from errors import ContractError

logger = logging.getLogger(__name__)

UEMB_MAGIC = b'UEMB'
UEMB_VERSION = 1
_HEADER = struct.Struct('<4sIQI')


def _profile_metadata(profile: ProfileMatrix) -> Dict:
    return {
        'source': profile.source,
        'normalization': profile.normalization,
        'feature_names': profile.feature_names,
        'column_sources': profile.column_sources,
        'extra': profile.metadata,
    }


def encode_uemb(profile: ProfileMatrix) -> bytes:
    """
    Format little-endian : magic 'UEMB', u32 version, u64 n_clients, u32 dim,
    u32 taille + métadonnées JSON UTF-8, puis n enregistrements
    (u64 client_id, dim × f32)
    """
    meta = json.dumps(_profile_metadata(profile), sort_keys=True, ensure_ascii=False).encode('utf-8')
    n, dim = profile.values.shape
    records = np.zeros(n, dtype=np.dtype([('client_id', '<u8'), ('values', '<f4', (dim,))]))
    records['client_id'] = profile.client_ids
    records['values'] = profile.values
    return (_HEADER.pack(UEMB_MAGIC, UEMB_VERSION, n, dim)
            + struct.pack('<I', len(meta)) + meta + records.tobytes())


def decode_uemb(blob: bytes) -> ProfileMatrix:
    if len(blob) < _HEADER.size or blob[:4] != UEMB_MAGIC:
        raise ContractError("en-tête UEMB invalide")
    _, version, n, dim = _HEADER.unpack_from(blob, 0)
    if version != UEMB_VERSION:
        raise ContractError(f"version UEMB non prise en charge : {version}")
    offset = _HEADER.size
    (meta_len,) = struct.unpack_from('<I', blob, offset)
    offset += 4
    meta = json.loads(blob[offset:offset + meta_len].decode('utf-8'))
    offset += meta_len
    dtype = np.dtype([('client_id', '<u8'), ('values', '<f4', (dim,))])
    if len(blob) - offset != n * dtype.itemsize:
        raise ContractError(f"taille de charge utile incohérente ({len(blob) - offset} octets pour {n} clients)")
    records = np.frombuffer(blob, dtype=dtype, count=n, offset=offset)
    return ProfileMatrix(
        client_ids=records['client_id'].astype(np.int64),
        values=records['values'].reshape(n, dim).astype(np.float32),
        source=meta.get('source', 'unknown'),
        column_sources=meta.get('column_sources'),
        normalization=meta.get('normalization', 'none'),
        feature_names=meta.get('feature_names'),
        metadata=meta.get('extra') or {},
    )


def write_uemb(profile: ProfileMatrix, path: str):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(encode_uemb(profile))
    logger.info(f"✓ Profils écrits : {path} ({profile.n_clients} clients × {profile.dim})")


def read_uemb(path: str) -> ProfileMatrix:
    with open(path, 'rb') as f:
        return decode_uemb(f.read())


def export_tsv(profile: ProfileMatrix, path: str):
    """Copie lisible d'un fichier de profils (une ligne par client)"""
    frame = profile.to_frame().astype(np.float32)
    frame.to_csv(path, sep='\t', float_format='%.7g')
    logger.info(f"✓ Export TSV : {path}")


def report_to_frame(report: Dict) -> pd.DataFrame:
    """Tableau source × tâche des scores, avec somme et points Borda"""
    records = []
    for row in report.get('rows', []):
        record = {'source': row['name'], 'largeur': row.get('width')}
        for task, result in row['tasks'].items():
            record[task] = result['score']
        record['sum'] = row['sum']
        records.append(record)
    frame = pd.DataFrame(records)
    if frame.empty:
        return frame
    borda = {b['name']: b['points'] for b in report.get('borda', [])}
    frame['borda'] = frame['source'].map(borda)
    return frame.set_index('source')


class DataExporter:
    """Gestion des exports de rapports"""

    def export_to_json(self, report: Dict, output_path: str):
        Path(output_path).parent.mkdir(parents=True, exist_ok=True)
        with open(output_path, 'w', encoding='utf-8') as f:
            json.dump(report, f, ensure_ascii=False, indent=2, sort_keys=True)
        logger.info(f"✓ Export JSON : {output_path}")

    def export_to_excel(self, report: Dict, output_path: str):
        """Exporte le rapport dans un fichier Excel multi-onglets"""

        with pd.ExcelWriter(output_path, engine='xlsxwriter') as writer:
            workbook = writer.book
            header_format = workbook.add_format({
                'bold': True,
                'bg_color': '#4472C4',
                'font_color': 'white',
                'align': 'center'
            })

            # 1. Vue d'ensemble
            overview = report_to_frame(report)
            overview.to_excel(writer, sheet_name="Vue d'ensemble")
            sheet = writer.sheets["Vue d'ensemble"]
            for col, name in enumerate(['source'] + list(overview.columns)):
                sheet.write(0, col, name, header_format)

            # 2. Un onglet par tâche
            for task in report.get('metadata', {}).get('tasks', []):
                rows = []
                for row in report['rows']:
                    result = row['tasks'].get(task)
                    if result is None:
                        continue
                    rows.append({'source': row['name'], 'AUROC': result['auroc'],
                                 'Nouveauté': result.get('novelty'), 'Diversité': result.get('diversity'),
                                 'Score': result['score']})
                if rows:
                    pd.DataFrame(rows).to_excel(writer, sheet_name=task[:31], index=False)

            # 3. Borda
            borda = report.get('borda', [])
            if borda:
                pd.DataFrame(borda).to_excel(writer, sheet_name='Borda', index=False)

        logger.info(f"✓ Export Excel : {output_path}")

    def export_summary(self, report: Dict, output_path: str):
        """Résumé texte du rapport"""
        frame = report_to_frame(report)
        meta = report.get('metadata', {})
        lines: List[str] = [
            "RAPPORT D'ÉVALUATION DES PROFILS",
            "=" * 50,
            "",
            f"Clients évalués : {meta.get('n_clients', '--')}",
            f"Coupure : {meta.get('cutoff', '--')}",
            f"Graine : {meta.get('seed', '--')}",
            "",
            "SCORES PAR SOURCE :",
            "-" * 30,
        ]
        if not frame.empty:
            lines.append(frame.to_string(float_format=lambda v: f"{v:.4f}"))
            best = frame['sum'].idxmax()
            lines += ["", f"Meilleure somme : {best} ({frame.loc[best, 'sum']:.4f})"]
        with open(output_path, 'w', encoding='utf-8') as f:
            f.write("\n".join(lines) + "\n")
        logger.info(f"✓ Résumé : {output_path}")
