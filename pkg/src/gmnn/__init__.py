"""Graph Markov neural networks: EM-coupled GNN pairs for semi-supervised
node classification, link classification and unsupervised representation
learning, on a small numpy autodiff core."""

from .autodiff import (Adam, RMSProp, SparseMatrix, Tape, Tensor, add, add_bias,
                       affine, backward, dropout, make_optimizer,
                       masked_cross_entropy, relu, scale, sparse_dropout, spmm,
                       tensor_sum)
from .baselines import LPConfig, label_propagation, self_training
from .em import (EMConfig, EMHistory, e_step, fixed_point_inference, m_step,
                 pretrain_q, sample_labels, train_gmnn, train_nonamortized)
from .graphdata import (Graph, LabelKind, LabelStates, Split, binarize_features,
                        build_line_graph, line_graph_from_edges, load_dataset,
                        make_label_features, normalize_adjacency, one_hot,
                        write_dataset)
from .models import (GnnModel, LayerSpec, PNet, QNet, accuracy, build_pnet,
                     build_qnet, extract_representations, load_model,
                     make_layer_specs, p_forward, predict, q_forward,
                     row_softmax, save_model)
from .tasks import (LinkTaskSpec, ProbeConfig, RunResult, aggregate, binary_f1,
                    linear_probe, load_weighted_edges, neighbor_targets,
                    render_mean_std, run_link_classification,
                    run_object_classification, run_unsupervised)

__version__ = "0.1.0"
