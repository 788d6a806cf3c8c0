#include "fedmema/federation.hpp"

#include <zlib.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <fstream>
#include <iostream>
#include <numeric>
#include <thread>

#include "fedmema/errors.hpp"
#include "fedmema/wire.hpp"
#include "json.hpp"

namespace fedmema {

using json = nlohmann::ordered_json;

namespace {

constexpr std::uint8_t kNoModality = 0xFF;
constexpr std::size_t kEvalBatch = 16;

NetConfig net_config(const ExperimentConfig& cfg) {
  NetConfig n;
  n.base_width = cfg.base_width;
  n.num_classes = cfg.num_classes;
  n.input_size = cfg.image_size;
  return n;
}

AdamConfig adam_config(const ExperimentConfig& cfg) {
  AdamConfig a;
  a.lr = cfg.lr;
  a.weight_decay = cfg.weight_decay;
  return a;
}

LossWeights loss_weights(const ExperimentConfig& cfg) { return {cfg.dice_weight, cfg.ce_weight}; }

std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order, std::size_t batch, Rng& rng) {
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch)));
  }
  return out;
}

template <typename Fn>
MetricRecord evaluate_batches(std::size_t n, Fn&& fn) {
  MetricAccumulator acc;
  for (std::size_t i = 0; i < n; i += kEvalBatch) {
    std::vector<std::size_t> idx(std::min(kEvalBatch, n - i));
    std::iota(idx.begin(), idx.end(), i);
    acc.add(fn(idx));
  }
  return acc.result();
}

std::array<std::size_t, kLevels> level_widths(const NetConfig& n) {
  std::array<std::size_t, kLevels> w{};
  for (std::size_t l = 1; l <= kLevels; ++l) w[l - 1] = n.channels(l);
  return w;
}

}  // namespace

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(threads, n); ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Messages

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> encode_message(const RoundMessage& msg) {
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(msg.kind));
  w.u32(msg.round);
  w.u8(msg.modality ? static_cast<std::uint8_t>(*msg.modality) : kNoModality);
  w.u32(static_cast<std::uint32_t>(msg.payload.size()));
  w.bytes(msg.payload);
  const std::uint32_t crc = crc32_of(w.buffer());
  w.u32(crc);
  return w.take();
}

RoundMessage decode_message(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 14) throw ProtocolError("round message too short (" + std::to_string(bytes.size()) + " bytes)");
  const auto body = bytes.first(bytes.size() - 4);
  ByteReader tail(bytes.last(4), "round message checksum");
  const std::uint32_t expected = tail.u32();
  if (crc32_of(body) != expected) throw ProtocolError("round message checksum mismatch");
  ByteReader r(body, "round message");
  RoundMessage msg;
  const auto kind = r.u8();
  if (kind > static_cast<std::uint8_t>(MessageKind::DecoderUp)) {
    throw ProtocolError("unknown message kind " + std::to_string(kind));
  }
  msg.kind = static_cast<MessageKind>(kind);
  msg.round = r.u32();
  const auto mod = r.u8();
  if (mod != kNoModality) {
    if (mod > static_cast<std::uint8_t>(Modality::FLAIR)) throw ProtocolError("unknown modality id " + std::to_string(mod));
    msg.modality = static_cast<Modality>(mod);
  }
  const std::size_t len = r.u32();
  if (r.remaining() != len) throw ProtocolError("round message payload length does not match framing");
  const auto payload = r.bytes(len);
  msg.payload.assign(payload.begin(), payload.end());
  return msg;
}

void Transport::send(std::size_t from, std::size_t to, const RoundMessage& msg) {
  if (drop && drop(from, to, msg)) return;
  auto bytes = encode_message(msg);
  if (tamper) tamper(bytes);
  std::lock_guard lock(mu_);
  if (keep_log_) log_.push_back(bytes);
  inbox_[to].push_back({from, seq_++, std::move(bytes)});
}

std::vector<Transport::Envelope> Transport::receive(std::size_t to) {
  std::vector<Queued> queued;
  {
    std::lock_guard lock(mu_);
    queued.swap(inbox_[to]);
  }
  std::sort(queued.begin(), queued.end(), [](const Queued& a, const Queued& b) {
    return a.from != b.from ? a.from < b.from : a.seq < b.seq;
  });
  std::vector<Envelope> out;
  for (const auto& q : queued) out.push_back({q.from, decode_message(q.bytes)});
  return out;
}

std::vector<std::vector<std::uint8_t>> Transport::wire_log() const {
  std::lock_guard lock(mu_);
  return log_;
}

std::size_t Transport::messages_sent() const {
  std::lock_guard lock(mu_);
  return seq_;
}

ParamStore aggregate_encoders(std::span<const ParamStore> updates) {
  if (updates.empty()) throw ProtocolError("aggregate_encoders: no updates to aggregate");
  const ParamStore& first = updates.front();
  for (std::size_t u = 1; u < updates.size(); ++u) {
    const ParamStore& other = updates[u];
    if (other.size() != first.size()) {
      throw ProtocolError("aggregate_encoders: update " + std::to_string(u) + " has " +
                          std::to_string(other.size()) + " tensors, expected " + std::to_string(first.size()));
    }
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (other[i].name != first[i].name || other[i].tensor.shape() != first[i].tensor.shape()) {
        throw ProtocolError("aggregate_encoders: update " + std::to_string(u) + " tensor '" + other[i].name +
                            "' does not match '" + first[i].name + "' " + shape_str(first[i].tensor.shape()));
      }
    }
  }
  ParamStore out = first.clone();
  const double n = static_cast<double>(updates.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto dst = out[i].tensor.mutable_data();
    const auto base = first[i].tensor.data();
    // x0 + sum(xi - x0)/N: exact when every update is identical.
    for (std::size_t k = 0; k < dst.size(); ++k) {
      double acc = 0.0;
      for (std::size_t u = 1; u < updates.size(); ++u) acc += updates[u][i].tensor[k] - base[k];
      dst[k] = base[k] + acc / n;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Client

Client::Client(const ClientAssignment& assignment, const Dataset& train, const ExperimentConfig& cfg)
    : id_(assignment.id),
      view_(train, assignment.indices, assignment.modality),
      cfg_(cfg),
      encoder_(assignment.modality, net_config(cfg), derive_seed(cfg.seed, "client/encoder", assignment.id)),
      decoder_(net_config(cfg), derive_seed(cfg.seed, "client/decoder", assignment.id)),
      enc_opt_(adam_config(cfg)),
      dec_opt_(adam_config(cfg)) {}

Tensor Client::forward(const Tensor& images, std::array<AttentionTrace, kLevels>* traces) const {
  const FeaturePyramid pyr = encoder_.forward(images);
  if (anchors_ && cfg_.uses_lacca()) {
    const auto cal = apply_lacca(pyr, *anchors_, cfg_.heads, traces);
    return decoder_.forward(pyr, cal);
  }
  return decoder_.forward(pyr);
}

Tensor Client::loss_on(std::span<const std::size_t> local) const {
  return dice_ce_loss(forward(view_.images(local)), view_.masks(local), loss_weights(cfg_));
}

TrainStats Client::train(std::size_t epochs, std::uint32_t round) {
  if (view_.size() == 0) throw ConfigError("client " + std::to_string(id_) + " has no local samples");
  TrainStats stats;
  if (epochs == 0) return stats;
  Rng rng(derive_seed(derive_seed(cfg_.seed, "client/shuffle", id_), "round", round));
  std::vector<std::size_t> order(view_.size());
  std::iota(order.begin(), order.end(), 0);
  double total = 0.0;
  for (std::size_t e = 0; e < epochs; ++e) {
    for (const auto& batch : make_batches(order, cfg_.batch_size, rng)) {
      encoder_.params().zero_grad();
      decoder_.params().zero_grad();
      Tape tape;
      Tensor loss;
      {
        Tape::Scope scope(tape);
        loss = loss_on(batch);
      }
      tape.backward(loss);
      enc_opt_.step(encoder_.params());
      dec_opt_.step(decoder_.params());
      total += loss.item();
      ++stats.steps;
    }
  }
  stats.loss = total / static_cast<double>(stats.steps);
  return stats;
}

MetricRecord Client::evaluate(const Dataset& data) const {
  return evaluate_batches(data.size(), [&](const std::vector<std::size_t>& idx) {
    return dsc_metric(forward(data.modality_batch(idx, modality())), data.mask_batch(idx));
  });
}

// ---------------------------------------------------------------------------
// Server

Server::Server(const Dataset& train, std::vector<std::size_t> indices, const ExperimentConfig& cfg)
    : data_(&train),
      indices_(std::move(indices)),
      cfg_(cfg),
      modality_encoders_(cfg.modality_encoders()),
      fusion_(net_config(cfg), derive_seed(cfg.seed, "server/fusion")),
      regularizer_(net_config(cfg), derive_seed(cfg.seed, "server/decoder")),
      fusion_opt_(adam_config(cfg)),
      reg_opt_(adam_config(cfg)),
      bank_(cfg.effective_n_k(), cfg.num_classes, level_widths(net_config(cfg))) {
  const NetConfig n = net_config(cfg);
  if (modality_encoders_) {
    for (auto m : kAllModalities) {
      encoders_.emplace_back(m, n, derive_seed(cfg.seed, "server/encoder", static_cast<std::uint64_t>(m)));
    }
  } else {
    encoders_.emplace_back(Modality::T1, n, derive_seed(cfg.seed, "server/encoder", 4));
  }
  enc_opts_.assign(encoders_.size(), Adam(adam_config(cfg)));
}

Encoder& Server::encoder(Modality m) {
  if (!modality_encoders_) throw ContractError("this server has a single shared encoder");
  return encoders_[static_cast<std::size_t>(m)];
}

const Encoder& Server::encoder(Modality m) const {
  if (!modality_encoders_) throw ContractError("this server has a single shared encoder");
  return encoders_[static_cast<std::size_t>(m)];
}

Tensor Server::loss_on(std::span<const std::size_t> idx) const {
  const LabelMap masks = data_->mask_batch(idx);
  const LossWeights w = loss_weights(cfg_);
  if (!modality_encoders_) {
    Tensor loss;
    for (auto m : kAllModalities) {
      const Tensor part = scale(
          dice_ce_loss(regularizer_.forward(encoders_.front().forward(data_->modality_batch(idx, m))), masks, w),
          1.0 / static_cast<double>(kAllModalities.size()));
      loss = loss.defined() ? add(loss, part) : part;
    }
    return loss;
  }
  std::map<Modality, FeaturePyramid> pyrs;
  for (auto m : kAllModalities) pyrs[m] = encoders_[static_cast<std::size_t>(m)].forward(data_->modality_batch(idx, m));
  Tensor loss = dice_ce_loss(fusion_.forward(pyrs).logits, masks, w);
  if (cfg_.lambda_reg > 0.0) {
    for (auto m : kAllModalities) {
      loss = add(loss, scale(dice_ce_loss(regularizer_.forward(pyrs.at(m)), masks, w), cfg_.lambda_reg));
    }
  }
  return loss;
}

TrainStats Server::train(std::size_t epochs, std::uint32_t round) {
  TrainStats stats;
  if (epochs == 0 || indices_.empty()) return stats;
  Rng rng(derive_seed(cfg_.seed, "server/shuffle", round));
  double total = 0.0;
  for (std::size_t e = 0; e < epochs; ++e) {
    for (const auto& batch : make_batches(indices_, cfg_.batch_size, rng)) {
      for (auto& enc : encoders_) enc.params().zero_grad();
      fusion_.params().zero_grad();
      regularizer_.params().zero_grad();
      Tape tape;
      Tensor loss;
      {
        Tape::Scope scope(tape);
        loss = loss_on(batch);
      }
      tape.backward(loss);
      for (std::size_t i = 0; i < encoders_.size(); ++i) enc_opts_[i].step(encoders_[i].params());
      if (modality_encoders_) fusion_opt_.step(fusion_.params());
      if (!modality_encoders_ || cfg_.lambda_reg > 0.0) reg_opt_.step(regularizer_.params());
      total += loss.item();
      ++stats.steps;
    }
  }
  stats.loss = total / static_cast<double>(stats.steps);
  return stats;
}

Tensor Server::forward(const Tensor& full) const {
  if (!modality_encoders_) {
    Tensor logits;
    for (auto m : kAllModalities) {
      const auto c = static_cast<std::size_t>(m);
      const Tensor part = scale(regularizer_.forward(encoders_.front().forward(slice(full, 1, c, c + 1))),
                                1.0 / static_cast<double>(kAllModalities.size()));
      logits = logits.defined() ? add(logits, part) : part;
    }
    return logits;
  }
  std::map<Modality, FeaturePyramid> pyrs;
  for (auto m : kAllModalities) {
    const auto c = static_cast<std::size_t>(m);
    pyrs[m] = encoders_[c].forward(slice(full, 1, c, c + 1));
  }
  return fusion_.forward(pyrs).logits;
}

MetricRecord Server::evaluate(const Dataset& data) const {
  return evaluate_batches(data.size(), [&](const std::vector<std::size_t>& idx) {
    return dsc_metric(forward(data.full_batch(idx)), data.mask_batch(idx));
  });
}

double Server::refresh_anchors(std::uint32_t round) {
  if (!modality_encoders_) throw ContractError("anchors need the modality-encoder server");
  std::vector<ClassFeature> feats;
  for (std::size_t i = 0; i < indices_.size(); i += kEvalBatch) {
    const std::span<const std::size_t> chunk(indices_.data() + i, std::min(kEvalBatch, indices_.size() - i));
    std::map<Modality, FeaturePyramid> pyrs;
    for (auto m : kAllModalities) {
      pyrs[m] = encoders_[static_cast<std::size_t>(m)].forward(data_->modality_batch(chunk, m));
    }
    auto part = masked_class_pool(fusion_.fuse(pyrs), data_->mask_batch(chunk), cfg_.num_classes, i);
    feats.insert(feats.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  AnchorExtractOptions opt;
  opt.n_k = cfg_.effective_n_k();
  opt.membership = cfg_.level;
  opt.seed = derive_seed(cfg_.seed, "anchors", round);
  const AnchorSet fresh = extract_anchors(feats, cfg_.num_classes, level_widths(net_config(cfg_)), opt);
  return ema_update(bank_, fresh, cfg_.omega);
}

std::map<std::string, const ParamStore*> Server::stores() const {
  std::map<std::string, const ParamStore*> out;
  if (modality_encoders_) {
    for (auto m : kAllModalities) {
      out["server_encoder_" + std::string(modality_name(m))] = &encoders_[static_cast<std::size_t>(m)].params();
    }
    out["server_fusion"] = &fusion_.params();
    out["server_regularizer"] = &regularizer_.params();
  } else {
    out["server_encoder"] = &encoders_.front().params();
    out["server_decoder"] = &regularizer_.params();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Round records

namespace {

json metric_fields(const std::optional<MetricRecord>& m) {
  if (!m) return nullptr;
  return m->mdsc;
}

json per_class(const std::optional<MetricRecord>& m) {
  if (!m) return nullptr;
  return m->per_class;
}

template <typename T>
json opt(const std::optional<T>& v) {
  if (!v) return nullptr;
  return *v;
}

}  // namespace

std::string round_record_json(const RoundRecord& rec, bool include_wall) {
  json j;
  j["round"] = rec.round;
  j["server_loss"] = opt(rec.server_loss);
  j["server_mdsc"] = metric_fields(rec.server_metrics);
  j["per_client"] = json::array();
  for (const auto& c : rec.clients) {
    json e;
    e["id"] = c.id;
    e["modality"] = std::string(modality_name(c.modality));
    e["loss"] = opt(c.loss);
    e["mdsc"] = metric_fields(c.metrics);
    e["per_class_dsc"] = per_class(c.metrics);
    j["per_client"].push_back(e);
  }
  j["anchor_drift_l2"] = opt(rec.anchor_drift);
  if (include_wall) j["wall_ms"] = rec.wall_ms;
  return j.dump();
}

// ---------------------------------------------------------------------------
// Federation

Federation::Federation(const ExperimentConfig& cfg, const DataSplits& data)
    : cfg_(cfg), data_(&data) {
  validate_config(cfg_);
  if (data.train.size() != cfg_.train_samples()) {
    throw ConfigError("training set has " + std::to_string(data.train.size()) + " samples, configuration needs " +
                      std::to_string(cfg_.train_samples()));
  }
  net_config(cfg_).validate(cfg_.uses_lacca() ? cfg_.heads : 1);
  partition_ = fedmema::partition(data.train.size(), cfg_.setting, cfg_.clients_per_modality, cfg_.data_seed);
  server_ = std::make_unique<Server>(data.train, partition_.server, cfg_);
  for (const auto& a : partition_.clients) {
    clients_.push_back(std::make_unique<Client>(a, data.train, cfg_));
  }
}

bool Federation::evaluate_now() const {
  if (cfg_.eval_every == 0) return round_ == cfg_.rounds;
  return round_ % cfg_.eval_every == 0 || round_ == cfg_.rounds;
}

RoundRecord Federation::initialize() {
  if (initialized_) throw ContractError("federation already initialized");
  const auto t0 = std::chrono::steady_clock::now();
  RoundRecord rec;
  rec.round = 0;
  rec.server_loss = server_->train(cfg_.epochs_per_round, 0).loss;
  if (cfg_.uses_lacca()) rec.anchor_drift = server_->refresh_anchors(0);
  if (evaluate_now()) rec.server_metrics = server_->evaluate(data_->val);
  for (const auto& c : clients_) rec.clients.push_back({c->id(), c->modality(), std::nullopt, std::nullopt});
  initialized_ = true;
  rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

void Federation::broadcast() {
  const AblationMode mode = cfg_.mode;
  if (mode == AblationMode::LocalOnly) return;
  std::optional<std::vector<std::uint8_t>> pack;
  if (cfg_.uses_lacca()) pack = encode_anchor_pack(server_->bank().matrices());
  const bool fed_enc = mode == AblationMode::FedAvgAll || mode == AblationMode::FedEncoderOnly;
  const bool fed_dec = mode == AblationMode::FedAvgAll || mode == AblationMode::FedDecoderOnly;
  std::map<Modality, std::vector<std::uint8_t>> enc_payload;
  for (const auto& c : clients_) {
    if (server_->modality_encoders()) {
      auto [it, fresh] = enc_payload.try_emplace(c->modality());
      if (fresh) it->second = encode_checkpoint(server_->encoder(c->modality()).params());
      transport_.send(kServerSite, c->id(), {MessageKind::EncoderDown, round_, c->modality(), it->second});
    } else {
      if (fed_enc) {
        transport_.send(kServerSite, c->id(),
                        {MessageKind::EncoderDown, round_, std::nullopt, encode_checkpoint(server_->shared_encoder().params())});
      }
      if (fed_dec) {
        transport_.send(kServerSite, c->id(),
                        {MessageKind::DecoderDown, round_, std::nullopt, encode_checkpoint(server_->regularizer().params())});
      }
    }
    if (pack) transport_.send(kServerSite, c->id(), {MessageKind::AnchorDown, round_, std::nullopt, *pack});
  }
}

void Federation::client_phase(std::vector<ClientRoundRecord>& records) {
  records.assign(clients_.size(), {});
  const AblationMode mode = cfg_.mode;
  const bool eval = evaluate_now();
  parallel_for(clients_.size(), cfg_.parallelism, [&](std::size_t i) {
    Client& c = *clients_[i];
    for (auto& env : transport_.receive(c.id())) {
      const RoundMessage& msg = env.message;
      if (env.from != kServerSite) throw ProtocolError("client received a message from another client");
      if (msg.round != round_) {
        throw ProtocolError("client " + std::to_string(c.id()) + " expected round " + std::to_string(round_) +
                            ", got " + std::to_string(msg.round));
      }
      switch (msg.kind) {
        case MessageKind::EncoderDown:
          if (server_->modality_encoders() && msg.modality != c.modality()) {
            throw ProtocolError("client " + std::to_string(c.id()) + " received an encoder for another modality");
          }
          c.encoder().params().assign(decode_checkpoint(msg.payload));
          break;
        case MessageKind::DecoderDown:
          c.decoder().params().assign(decode_checkpoint(msg.payload));
          break;
        case MessageKind::AnchorDown:
          c.set_anchors(decode_anchor_pack(msg.payload));
          break;
        default:
          throw ProtocolError("client received an upload message");
      }
    }
    if (after_client_receive) after_client_receive(c, round_);
    ClientRoundRecord rec;
    rec.id = c.id();
    rec.modality = c.modality();
    rec.loss = c.train(cfg_.epochs_per_round, round_).loss;
    if (after_client_train) after_client_train(c, round_);
    if (eval) rec.metrics = c.evaluate(data_->val);
    records[i] = std::move(rec);

    if (mode == AblationMode::LocalOnly) return;
    const std::optional<Modality> tag = server_->modality_encoders() ? std::optional(c.modality()) : std::nullopt;
    if (server_->modality_encoders() || mode == AblationMode::FedAvgAll || mode == AblationMode::FedEncoderOnly) {
      transport_.send(c.id(), kServerSite,
                      {MessageKind::EncoderUp, round_, tag, encode_checkpoint(c.encoder().params())});
    }
    if (mode == AblationMode::FedAvgAll || mode == AblationMode::FedDecoderOnly) {
      transport_.send(c.id(), kServerSite,
                      {MessageKind::DecoderUp, round_, std::nullopt, encode_checkpoint(c.decoder().params())});
    }
  });
}

void Federation::collect() {
  const AblationMode mode = cfg_.mode;
  auto envs = transport_.receive(kServerSite);
  if (mode == AblationMode::LocalOnly) return;
  const bool want_enc = server_->modality_encoders() || mode == AblationMode::FedAvgAll ||
                        mode == AblationMode::FedEncoderOnly;
  const bool want_dec = mode == AblationMode::FedAvgAll || mode == AblationMode::FedDecoderOnly;
  std::map<std::size_t, ParamStore> enc_up, dec_up;
  for (auto& env : envs) {
    const RoundMessage& msg = env.message;
    if (msg.round != round_) {
      throw ProtocolError("server expected round " + std::to_string(round_) + " uploads, got round " +
                          std::to_string(msg.round));
    }
    auto& slot = msg.kind == MessageKind::EncoderUp   ? enc_up
                 : msg.kind == MessageKind::DecoderUp ? dec_up
                                                      : throw ProtocolError("server received a download message");
    if (!slot.emplace(env.from, decode_checkpoint(msg.payload)).second) {
      throw ProtocolError("client " + std::to_string(env.from) + " uploaded twice");
    }
  }
  for (const auto& c : clients_) {
    if (want_enc && !enc_up.contains(c->id())) {
      throw ProtocolError("missing encoder upload from client " + std::to_string(c->id()));
    }
    if (want_dec && !dec_up.contains(c->id())) {
      throw ProtocolError("missing decoder upload from client " + std::to_string(c->id()));
    }
  }
  // std::map iterates in client-id order, so the sums are order-independent
  // of thread completion.
  if (server_->modality_encoders()) {
    for (auto m : kAllModalities) {
      std::vector<ParamStore> ups;
      for (const auto& c : clients_)
        if (c->modality() == m) ups.push_back(enc_up.at(c->id()).clone());
      if (ups.empty()) continue;
      server_->encoder(m).params().assign(aggregate_encoders(ups));
    }
    return;
  }
  auto mean_of = [](std::map<std::size_t, ParamStore>& ups) {
    std::vector<ParamStore> v;
    for (auto& [id, s] : ups) v.push_back(std::move(s));
    return aggregate_encoders(v);
  };
  if (want_enc) server_->shared_encoder().params().assign(mean_of(enc_up));
  if (want_dec) server_->regularizer().params().assign(mean_of(dec_up));
}

RoundRecord Federation::run_round() {
  if (!initialized_) throw ContractError("initialize() must run before the first round");
  const auto t0 = std::chrono::steady_clock::now();
  ++round_;
  RoundRecord rec;
  rec.round = round_;
  broadcast();
  client_phase(rec.clients);
  collect();
  rec.server_loss = server_->train(cfg_.epochs_per_round, round_).loss;
  if (cfg_.uses_lacca()) rec.anchor_drift = server_->refresh_anchors(round_);
  if (evaluate_now()) rec.server_metrics = server_->evaluate(data_->val);
  rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

FinalMetrics Federation::evaluate(const Dataset& data) {
  FinalMetrics out;
  out.clients.resize(clients_.size());
  parallel_for(clients_.size(), cfg_.parallelism, [&](std::size_t i) {
    out.clients[i] = {clients_[i]->id(), clients_[i]->modality(), std::nullopt, clients_[i]->evaluate(data)};
  });
  double sum = 0.0;
  for (const auto& c : out.clients) sum += c.metrics->mdsc;
  out.client_avg_mdsc = out.clients.empty() ? 0.0 : sum / static_cast<double>(out.clients.size());
  out.server = server_->evaluate(data);
  out.server_mdsc = out.server.mdsc;
  return out;
}

// ---------------------------------------------------------------------------
// Artifacts

namespace {

void save_checkpoints(Federation& fed, const std::filesystem::path& dir) {
  for (const auto& [name, store] : fed.server().stores()) save_checkpoint(dir / (name + ".ckpt"), *store);
  if (fed.server().bank().any_initialized()) {
    write_file_bytes(dir / "server_anchors.pack", encode_anchor_pack(fed.server().bank().matrices()));
  }
  for (const auto& c : fed.clients()) {
    const std::string base = "client" + std::to_string(c->id());
    save_checkpoint(dir / (base + "_encoder.ckpt"), c->encoder().params());
    save_checkpoint(dir / (base + "_decoder.ckpt"), c->decoder().params());
    if (c->anchors()) write_file_bytes(dir / (base + "_anchors.pack"), encode_anchor_pack(*c->anchors()));
  }
}

json metrics_json(const ExperimentConfig& cfg, const FinalMetrics& m, double wall_ms) {
  json j;
  j["experiment"] = cfg.name;
  j["mode"] = std::string(mode_name(cfg.mode));
  j["seed"] = cfg.seed;
  j["data_seed"] = cfg.data_seed;
  j["split"] = "test";
  j["rounds"] = cfg.rounds;
  j["client_avg_mdsc"] = m.client_avg_mdsc;
  j["server_mdsc"] = m.server_mdsc;
  j["server_per_class_dsc"] = m.server.per_class;
  j["clients"] = json::array();
  for (const auto& c : m.clients) {
    j["clients"].push_back({{"id", c.id},
                            {"modality", std::string(modality_name(c.modality))},
                            {"mdsc", c.metrics->mdsc},
                            {"per_class_dsc", c.metrics->per_class}});
  }
  j["wall_ms"] = wall_ms;
  return j;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
}

void export_client_attention(const Client& c, const Dataset& val, const std::filesystem::path& run_dir,
                             std::uint32_t round) {
  if (!c.anchors()) return;
  const std::vector<std::size_t> first{0};
  std::array<AttentionTrace, kLevels> traces;
  c.forward(val.modality_batch(first, c.modality()), &traces);
  for (std::size_t l = 1; l <= kLevels; ++l) {
    const Tensor w = traces[l - 1].mean();
    json j;
    j["client"] = c.id();
    j["modality"] = std::string(modality_name(c.modality()));
    j["round"] = round;
    j["level"] = l;
    j["tokens"] = w.dim(0);
    j["anchors"] = w.dim(1);
    j["anchor_labels"] = c.anchors()->labels;
    json rows = json::array();
    for (std::size_t t = 0; t < w.dim(0); ++t) {
      rows.push_back(std::vector<double>(w.data().begin() + static_cast<std::ptrdiff_t>(t * w.dim(1)),
                                         w.data().begin() + static_cast<std::ptrdiff_t>((t + 1) * w.dim(1))));
    }
    j["weights"] = std::move(rows);
    write_text(run_dir / "attn" /
                   ("client" + std::to_string(c.id()) + "_round" + std::to_string(round) + "_level" +
                    std::to_string(l) + ".json"),
               j.dump());
  }
}

}  // namespace

std::filesystem::path run_directory(const ExperimentConfig& cfg) {
  return std::filesystem::path(cfg.out_dir) / cfg.name;
}

void export_attention(const Federation& fed, const Dataset& val, const std::filesystem::path& run_dir,
                      std::uint32_t round) {
  for (const auto& c : fed.clients()) export_client_attention(*c, val, run_dir, round);
}

RunResult run_federation(const ExperimentConfig& cfg, const RunOptions& options) {
  validate_config(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  const DataSplits data =
      generate_splits(cfg.train_samples(), cfg.val_samples, cfg.test_samples, cfg.image_size, cfg.data_seed);
  Federation fed(cfg, data);
  fed.transport().keep_wire_log(options.keep_messages);

  RunResult result;
  std::ofstream log;
  if (options.write_artifacts) {
    result.run_dir = run_directory(cfg);
    std::filesystem::create_directories(result.run_dir);
    write_text(result.run_dir / "config.snapshot", config_to_text(cfg));
    if (cfg.dump_data) {
      dump_dataset(result.run_dir / "data" / "train.fmds", data.train);
      dump_dataset(result.run_dir / "data" / "val.fmds", data.val);
      dump_dataset(result.run_dir / "data" / "test.fmds", data.test);
    }
    log.open(result.run_dir / "rounds.jsonl", std::ios::binary | std::ios::trunc);
    if (!log) throw DataError("cannot write " + (result.run_dir / "rounds.jsonl").string());
    if (cfg.export_attn) {
      const auto dir = result.run_dir;
      fed.after_client_train = [dir, &data](const Client& c, std::uint32_t round) {
        export_client_attention(c, data.val, dir, round);
      };
    }
  }
  auto record = [&](RoundRecord rec) {
    if (log.is_open()) log << round_record_json(rec) << "\n" << std::flush;
    if (!options.quiet) {
      std::cerr << "[" << cfg.name << "] round " << rec.round << "/" << cfg.rounds;
      if (rec.server_loss) std::cerr << " server_loss " << *rec.server_loss;
      if (rec.server_metrics) std::cerr << " server_mdsc " << rec.server_metrics->mdsc;
      std::cerr << " (" << static_cast<long>(rec.wall_ms) << " ms)\n";
    }
    result.rounds.push_back(std::move(rec));
  };

  record(fed.initialize());
  if (options.write_artifacts) save_checkpoints(fed, result.run_dir / "checkpoints" / "init");
  for (std::size_t r = 0; r < cfg.rounds; ++r) record(fed.run_round());
  if (options.write_artifacts && cfg.rounds > 0) save_checkpoints(fed, result.run_dir / "checkpoints" / "final");

  result.final_metrics = fed.evaluate(data.test);
  const double wall = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  if (options.write_artifacts) {
    write_text(result.run_dir / "metrics.json", metrics_json(cfg, result.final_metrics, wall).dump(2) + "\n");
  }
  if (options.keep_messages) result.messages = fed.transport().wire_log();
  return result;
}

std::size_t export_attention_from_run(const std::filesystem::path& run_dir) {
  const ExperimentConfig cfg = load_config(run_dir / "config.snapshot");
  if (!cfg.uses_lacca()) throw ConfigError("run in " + run_dir.string() + " does not use calibration; nothing to export");
  const auto ckpt = run_dir / "checkpoints" / "final";
  if (!std::filesystem::exists(ckpt)) throw DataError("no final checkpoints in " + run_dir.string());
  const DataSplits data =
      generate_splits(cfg.train_samples(), cfg.val_samples, cfg.test_samples, cfg.image_size, cfg.data_seed);
  Federation fed(cfg, data);
  for (auto& c : fed.clients()) {
    const std::string base = "client" + std::to_string(c->id());
    c->encoder().params().assign(load_checkpoint(ckpt / (base + "_encoder.ckpt")));
    c->decoder().params().assign(load_checkpoint(ckpt / (base + "_decoder.ckpt")));
    c->set_anchors(decode_anchor_pack(read_file_bytes(ckpt / (base + "_anchors.pack"))));
  }
  export_attention(fed, data.val, run_dir, static_cast<std::uint32_t>(cfg.rounds));
  return fed.clients().size() * kLevels;
}

}  // namespace fedmema
