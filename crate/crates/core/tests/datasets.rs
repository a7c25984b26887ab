use std::fs;
use std::path::Path;

use gmope::graph::{load_dataset, DatasetId, Domain};
use gmope::GmopeError;
use ndarray::{array, Array1};
use ndarray_npy::NpzWriter;

fn write(dir: &Path, name: &str, body: &str) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join(name), body).unwrap();
}

#[test]
fn linqs_citation_files_parse() {
    let cache = tempfile::tempdir().unwrap();
    let raw = cache.path().join("cora/raw");
    write(
        &raw,
        "cora.content",
        "31 1 0 0 1 Theory\n7 0 1 0 0 Neural_Networks\n99 0 0 1 1 Theory\n",
    );
    write(&raw, "cora.cites", "31 7\n7 99\n99 31\n31 12345\n");
    let c = load_dataset::<f64>("cora", cache.path()).unwrap();
    assert_eq!(c.domain, Domain::Citation);
    assert_eq!(c.graphs.len(), 1);
    let g = &c.graphs[0];
    assert_eq!(g.node_count(), 3);
    assert_eq!(g.feature_dim(), 4);
    assert_eq!(g.edge_count(), 3);
    assert_eq!(c.node_classes, Some(2));
    assert_eq!(g.features().row(0).to_vec(), vec![1.0, 0.0, 0.0, 1.0]);
    let labels = g.node_labels().unwrap();
    assert_eq!(labels[0], labels[2]);
    assert_ne!(labels[0], labels[1]);

    // Second load comes from the processed cache, even with raw files gone.
    fs::remove_dir_all(&raw).unwrap();
    let again = load_dataset::<f64>("cora", cache.path()).unwrap();
    assert_eq!(again, c);
}

#[test]
fn pubmed_tab_files_parse() {
    let cache = tempfile::tempdir().unwrap();
    let raw = cache.path().join("pubmed/raw");
    write(
        &raw,
        "Pubmed-Diabetes.NODE.paper.tab",
        "NODE\tpaper\n\
         cat=1,2,3:label\tnumeric:w-a:0.0\tnumeric:w-b:0.0\tstring:summary\n\
         11\tlabel=1\tw-a=0.5\tsummary=w-a\n\
         22\tlabel=3\tw-b=0.25\tw-a=0.1\tsummary=w-b,w-a\n",
    );
    write(
        &raw,
        "Pubmed-Diabetes.DIRECTED.cites.tab",
        "DIRECTED\tcites\nNO_FEATURES\n0\tpaper:11\t|\tpaper:22\n",
    );
    let c = load_dataset::<f64>("pubmed", cache.path()).unwrap();
    let g = &c.graphs[0];
    assert_eq!(g.node_count(), 2);
    assert_eq!(g.feature_dim(), 2);
    assert_eq!(g.edge_count(), 1);
    assert_eq!(g.features().row(1).to_vec(), vec![0.1, 0.25]);
    assert_eq!(g.node_labels().unwrap(), &[0, 1]);
}

#[test]
fn amazon_npz_parses() {
    let cache = tempfile::tempdir().unwrap();
    let raw = cache.path().join("photo/raw");
    fs::create_dir_all(&raw).unwrap();
    let file = fs::File::create(raw.join("amazon_electronics_photo.npz")).unwrap();
    let mut npz = NpzWriter::new(file);
    npz.add_array("adj_data.npy", &array![1.0f32, 1.0, 1.0]).unwrap();
    npz.add_array("adj_indices.npy", &array![1i64, 2, 0]).unwrap();
    npz.add_array("adj_indptr.npy", &array![0i64, 2, 3, 3]).unwrap();
    npz.add_array("adj_shape.npy", &array![3i64, 3]).unwrap();
    npz.add_array("attr_data.npy", &array![2.0f32, 3.0]).unwrap();
    npz.add_array("attr_indices.npy", &array![0i64, 1]).unwrap();
    npz.add_array("attr_indptr.npy", &array![0i64, 1, 1, 2]).unwrap();
    npz.add_array("attr_shape.npy", &array![3i64, 2]).unwrap();
    npz.add_array("labels.npy", &Array1::from(vec![4i64, 4, 1])).unwrap();
    npz.finish().unwrap();
    let c = load_dataset::<f32>("photo", cache.path()).unwrap();
    assert_eq!(c.domain, Domain::Product);
    let g = &c.graphs[0];
    assert_eq!(g.node_count(), 3);
    assert_eq!(g.edge_count(), 2);
    assert_eq!(g.features()[[2, 1]], 3.0);
    assert_eq!(c.node_classes, Some(2));
}

#[test]
fn tu_benchmark_files_parse() {
    let cache = tempfile::tempdir().unwrap();
    let raw = cache.path().join("proteins/raw");
    write(&raw, "PROTEINS_A.txt", "1, 2\n2, 1\n2, 3\n3, 2\n4, 5\n5, 4\n");
    write(&raw, "PROTEINS_graph_indicator.txt", "1\n1\n1\n2\n2\n");
    write(&raw, "PROTEINS_graph_labels.txt", "1\n2\n");
    write(&raw, "PROTEINS_node_labels.txt", "0\n1\n2\n0\n2\n");
    let c = load_dataset::<f64>("proteins", cache.path()).unwrap();
    assert_eq!(c.domain, Domain::Molecular);
    assert_eq!(c.graphs.len(), 2);
    assert_eq!(c.graph_classes, Some(2));
    assert_eq!(c.graphs[0].node_count(), 3);
    assert_eq!(c.graphs[1].node_count(), 2);
    assert_eq!(c.graphs[1].edge_count(), 1);
    assert_eq!(c.graphs[1].features().row(1).to_vec(), vec![0.0, 0.0, 1.0]);
    assert_eq!(c.graphs[1].graph_label(), Some(1));
}

#[test]
fn tu_edges_crossing_graphs_are_rejected() {
    let cache = tempfile::tempdir().unwrap();
    let raw = cache.path().join("dd/raw");
    write(&raw, "DD_A.txt", "1, 3\n");
    write(&raw, "DD_graph_indicator.txt", "1\n1\n2\n");
    write(&raw, "DD_graph_labels.txt", "1\n2\n");
    let err = load_dataset::<f64>("dd", cache.path()).unwrap_err();
    assert!(matches!(err, GmopeError::Ingestion { .. }), "{err}");
    assert!(err.is_configuration());
}

#[test]
fn every_dataset_names_its_raw_files() {
    for id in DatasetId::ALL {
        assert!(!id.raw_files().is_empty());
        let parsed: DatasetId = id.name().parse().unwrap();
        assert_eq!(parsed, id);
    }
}
