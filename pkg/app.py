import pandas as pd
import plotly.express as px
import streamlit as st

from bpe_tokenizer import Tokenizer, load_tokenizer
from byte_sampler import ByteDistribution, ByteSampler
from covering_tree import ValidCoveringTree
from errors import ByteConditioningError
from language_models import UniformLM, random_tabular_lm
from oracle import ToyTokenizerSpec, random_toy_tokenizer


def tree_frame(tree: ValidCoveringTree, tokenizer: Tokenizer) -> pd.DataFrame:
    """One row per trunk token and per branch edge, with byte offsets"""
    rows, offset = [], 0
    for i, token in enumerate(tree.trunk):
        data = tokenizer.token_bytes(token)
        rows.append({'kind': 'trunk', 'depth': i, 'token': token,
                     'piece': data.decode('utf-8', 'backslashreplace'), 'start': offset, 'end': offset + len(data)})
        offset += len(data)
    for depth, token, start, end in tree.branch_edges():
        rows.append({'kind': 'branch', 'depth': depth, 'token': token,
                     'piece': tokenizer.token_bytes(token).decode('utf-8', 'backslashreplace'),
                     'start': start, 'end': end})
    return pd.DataFrame(rows, columns=['kind', 'depth', 'token', 'piece', 'start', 'end'])


def distribution_frame(dist: ByteDistribution, top: int = 20) -> pd.DataFrame:
    """Most likely next events, highest first"""
    rows = [{'event': i, 'label': dist.label(i), 'probability': float(p)}
            for i, p in enumerate(dist.probs) if p > 0]
    frame = pd.DataFrame(rows, columns=['event', 'label', 'probability'])
    return frame.sort_values('probability', ascending=False, kind='stable').head(top).reset_index(drop=True)


@st.cache_resource
def load_toy(seed: int, pretokenized: bool) -> Tokenizer:
    return random_toy_tokenizer(ToyTokenizerSpec(seed=seed, alphabet_size=4, merge_count=16,
                                                 pretokenized=pretokenized))


@st.cache_resource
def load_file(path: str) -> Tokenizer:
    return load_tokenizer(path)


def main():
    st.set_page_config(page_title="Covering Tree Inspector", page_icon="🌳", layout="wide")
    st.title("🌳 Covering Tree Inspector")
    st.subheader("Byte-level prompt conditioning for BPE models")

    st.sidebar.title("Tokenizer")
    source = st.sidebar.selectbox("Source", ["Toy tokenizer", "tokenizer.json file"])
    try:
        if source == "Toy tokenizer":
            seed = st.sidebar.number_input("Seed", min_value=0, value=0, step=1)
            pretokenized = st.sidebar.checkbox("GPT-2 pretokenizer", value=True)
            tokenizer = load_toy(int(seed), pretokenized)
        else:
            path = st.sidebar.text_input("Path to tokenizer.json")
            if not path:
                st.info("Enter a tokenizer path in the sidebar")
                return
            tokenizer = load_file(path)
    except (ByteConditioningError, OSError) as e:
        st.error(f"❌ Could not load tokenizer: {e}")
        return

    st.sidebar.markdown("---")
    st.sidebar.subheader("🔍 Model")
    model = st.sidebar.selectbox("Language model", ["Uniform", "Random table"])
    lm_seed = st.sidebar.number_input("Model seed", min_value=0, value=0, step=1)
    lm = UniformLM(tokenizer.vocab_size) if model == "Uniform" else random_tabular_lm(tokenizer, 8, int(lm_seed))

    prompt = st.text_input("Prompt", value="ab a")
    sampler = ByteSampler(lm, tokenizer)
    try:
        tree = sampler.tree_for(prompt)
        stats = tree.branch_stats()
        dist = sampler.next_byte_distribution(tree)
        logprob = sampler.prefix_logprob(prompt, tree)
    except ByteConditioningError as e:
        st.error(f"❌ {e}")
        return

    col1, col2, col3, col4 = st.columns(4)
    with col1:
        st.metric("Trunk tokens", len(tree.trunk))
    with col2:
        st.metric("Branch edges", stats.non_trunk_edges)
    with col3:
        st.metric("Live hypotheses", stats.live_hypotheses)
    with col4:
        st.metric("log P(prefix)", f"{logprob:.4f}")

    left, right = st.columns(2)
    with left:
        st.header("🌿 Tree")
        st.code(tree.dump(), language=None)
        st.dataframe(tree_frame(tree, tokenizer), use_container_width=True)
    with right:
        st.header("📊 Next byte")
        frame = distribution_frame(dist)
        fig = px.bar(frame, x='label', y='probability', title="Next-event distribution")
        st.plotly_chart(fig, use_container_width=True)
        st.dataframe(frame, use_container_width=True)


if __name__ == "__main__":
    main()
