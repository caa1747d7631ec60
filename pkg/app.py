"""
Dashboard Streamlit des rapports d'évaluation de profils
"""

import json
import logging
import sys
from pathlib import Path

import pandas as pd
import plotly.express as px
import streamlit as st

# Ajouter le dossier src au path
sys.path.append(str(Path(__file__).parent / 'src'))

from exporter import read_uemb, report_to_frame

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

st.set_page_config(
    page_title="uniprofile - Évaluation des profils",
    page_icon="📊",
    layout="wide"
)

st.markdown("""
<style>
    .main-header {
        font-size: 2.5rem;
        font-weight: bold;
        text-align: center;
        margin-bottom: 2rem;
    }
</style>
""", unsafe_allow_html=True)


@st.cache_data
def load_report(content: bytes) -> dict:
    return json.loads(content.decode('utf-8'))


def task_frame(report: dict) -> pd.DataFrame:
    """Format long : une ligne par (source, tâche)"""
    records = []
    for row in report.get('rows', []):
        for task, result in row['tasks'].items():
            records.append({
                'source': row['name'],
                'tâche': task,
                'AUROC': result['auroc'],
                'nouveauté': result.get('novelty'),
                'diversité': result.get('diversity'),
                'score': result['score'],
            })
    return pd.DataFrame(records)


def main():
    st.markdown('<h1 class="main-header">📊 uniprofile</h1>', unsafe_allow_html=True)
    st.markdown("### Comparaison des sources de profils et du profil fusionné")

    with st.sidebar:
        st.header("📁 Rapport")
        uploaded = st.file_uploader("Choisir un rapport JSON", type=['json'])
        default_path = Path('output/run/report.json')
        use_default = uploaded is None and default_path.exists()
        if use_default:
            st.caption(f"Rapport par défaut : {default_path}")

    if uploaded is None and not use_default:
        st.info("👈 Chargez un rapport produit par `uniprofile run` ou `uniprofile evaluate`")
        return

    content = uploaded.getvalue() if uploaded is not None else default_path.read_bytes()
    report = load_report(content)
    overview = report_to_frame(report)
    meta = report.get('metadata', {})

    col1, col2, col3, col4 = st.columns(4)
    col1.metric("Clients évalués", meta.get('n_clients', '--'))
    col2.metric("Sources", len(overview))
    col3.metric("Coupure", meta.get('cutoff', '--'))
    if not overview.empty:
        col4.metric("Meilleure somme", overview['sum'].idxmax(), f"{overview['sum'].max():.4f}")

    tab1, tab2, tab3 = st.tabs(["📈 Scores par tâche", "🏆 Borda", "🧬 Profils"])

    with tab1:
        long = task_frame(report)
        if not long.empty:
            fig = px.bar(long, x='tâche', y='score', color='source', barmode='group',
                         title="Score par tâche et par source")
            st.plotly_chart(fig, use_container_width=True)
            st.dataframe(overview.style.format(precision=4), use_container_width=True)

    with tab2:
        borda = pd.DataFrame(report.get('borda', []))
        if not borda.empty:
            fig = px.bar(borda, x='name', y='points', title="Points de Borda")
            st.plotly_chart(fig, use_container_width=True)
            st.dataframe(borda, use_container_width=True)

    with tab3:
        uemb_file = st.text_input("Fichier .uemb à inspecter", value="")
        if uemb_file and Path(uemb_file).exists():
            profile = read_uemb(uemb_file)
            st.write(f"**{profile.source}** : {profile.n_clients} clients × {profile.dim} dimensions "
                     f"(normalisation : {profile.normalization})")
            st.dataframe(profile.to_frame().head(100), use_container_width=True)
            norms = pd.Series((profile.values.astype('float64') ** 2).sum(axis=1) ** 0.5, name='norme')
            st.plotly_chart(px.histogram(norms, nbins=50, title="Distribution des normes"),
                            use_container_width=True)


if __name__ == "__main__":
    main()
