#include "tcagu/model.hpp"

#include "tcagu/errors.hpp"

namespace tcagu {

ModelParams ModelParams::init(const ModelConfig& cfg, std::uint64_t seed, const Eigen::MatrixXd& initial_endmembers) {
  cfg.validate();
  ParamInit init(seed);
  ModelParams p;
  p.frontend = FrontendParams::init(cfg, init);
  p.attention = AttentionParams::init(cfg, init);
  p.graph = GraphMixParams::init(cfg);
  p.decoder = DecoderParams::init(cfg, init, initial_endmembers);
  return p;
}

ForwardResult forward(ad::Tape& tape, ModelParams& params, const ModelConfig& cfg, const ad::Tensor& cube) {
  if (cube.shape.size() != 3 || cube.shape[0] != cfg.bands) {
    throw DimensionError("forward: cube " + ad::shape_str(cube.shape) + " does not have " +
                         std::to_string(cfg.bands) + " bands");
  }
  const std::size_t h = cube.shape[1], w = cube.shape[2], b = cfg.fused_channels;
  ad::Var observed = tape.constant(cube);

  ad::Var features = compress(tape, params.frontend, cfg, observed);
  const TokenSequences tokens = tokenize(tape, params.frontend, cfg, features);
  const AttendedSequences attended = exchange_and_attend(tape, params.attention, tokens);

  ForwardResult out;
  out.fused = fuse_and_restore(tape, params.attention, cfg, attended, h, w);
  out.refined = out.fused;
  if (!cfg.graph_bypassed()) {
    ad::Var x = ad::reshape(out.fused, {b, h * w});
    const ContentGraph graph = cfg.graph_mode == GraphMode::dynamic
                                   ? build_graph(x, h, w, cfg)
                                   : build_static_grid_graph(tape, h, w, cfg.radius);
    out.graph_fingerprint = fingerprint(graph);
    out.refined = ad::reshape(propagate(tape, graph, params.graph, x, cfg.beta), {b, h, w});
  }

  const Decoded decoded = decode(tape, params.decoder, cfg, out.refined);
  out.abundances = decoded.abundances;
  out.reconstruction = decoded.reconstruction;
  out.loss = unmixing_loss(observed, decoded.reconstruction);
  return out;
}

}  // namespace tcagu
