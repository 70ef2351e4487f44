#include "mg/metrics.hpp"

#include <algorithm>
#include <map>
#include <sstream>
#include <stdexcept>

namespace mg {

real dice_coeff(const Mask& pred, const Mask& gt) {
    if (pred.h != gt.h || pred.w != gt.w)
        throw std::invalid_argument("dice: mask shape mismatch");
    std::size_t inter = 0, p = 0, g = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        p += pred.data[i] ? 1 : 0;
        g += gt.data[i] ? 1 : 0;
        inter += (pred.data[i] && gt.data[i]) ? 1 : 0;
    }
    if (p + g == 0) return 1.0;
    return 2.0 * static_cast<real>(inter) / static_cast<real>(p + g);
}

DiceReport mdice(const std::vector<Mask>& pred, const std::vector<Mask>& gt,
                 const std::vector<int>& classes) {
    if (pred.size() != gt.size() || pred.size() != classes.size())
        throw std::invalid_argument("mdice: input counts differ");
    std::map<int, std::pair<real, std::size_t>> acc;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        auto& [sum, n] = acc[classes[i]];
        sum += dice_coeff(pred[i], gt[i]);
        ++n;
    }
    DiceReport rep;
    real total = 0.0;
    for (const auto& [cls, sn] : acc) {
        rep.per_class[cls] = sn.first / static_cast<real>(sn.second);
        total += rep.per_class[cls];
    }
    if (!acc.empty()) rep.mean = total / static_cast<real>(acc.size());
    return rep;
}

std::pair<real, real> token_precision_recall(const std::vector<int>& pred,
                                             const std::vector<int>& gt) {
    if (pred.empty() && gt.empty()) return {1.0, 1.0};
    if (pred.empty()) return {0.0, 0.0};
    std::map<int, std::size_t> want;
    for (int t : gt) ++want[t];
    std::size_t hit = 0;
    for (int t : pred) {
        auto it = want.find(t);
        if (it != want.end() && it->second > 0) {
            --it->second;
            ++hit;
        }
    }
    real precision = static_cast<real>(hit) / static_cast<real>(pred.size());
    real recall = gt.empty() ? 1.0 : static_cast<real>(hit) / static_cast<real>(gt.size());
    return {precision, recall};
}

real closed_accuracy(const std::vector<std::vector<int>>& preds,
                     const std::vector<std::vector<int>>& gts) {
    if (preds.size() != gts.size())
        throw std::invalid_argument("closed_accuracy: length mismatch");
    if (preds.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == gts[i]) ++hits;
    return static_cast<real>(hits) / static_cast<real>(preds.size());
}

std::vector<RoutingRow> routing_report(
    const std::vector<std::vector<DispatchPlan>>& per_layer) {
    std::vector<RoutingRow> rows;
    for (std::size_t layer = 0; layer < per_layer.size(); ++layer) {
        if (per_layer[layer].empty()) continue;
        std::vector<ExpertLoad> loads = expert_load_stats(per_layer[layer]);
        for (std::size_t e = 0; e < loads.size(); ++e) {
            RoutingRow row;
            row.layer = layer;
            row.expert = e;
            row.kept = loads[e].kept;
            row.dropped = loads[e].dropped;
            row.fraction = loads[e].fraction;
            std::size_t origin_total = loads[e].image_kept + loads[e].text_kept;
            if (origin_total > 0) {
                row.image_fraction =
                    static_cast<real>(loads[e].image_kept) / static_cast<real>(origin_total);
                row.text_fraction =
                    static_cast<real>(loads[e].text_kept) / static_cast<real>(origin_total);
            }
            rows.push_back(row);
        }
    }
    return rows;
}

std::string format_routing(const std::vector<RoutingRow>& rows) {
    std::ostringstream os;
    for (const RoutingRow& r : rows)
        os << "layer=" << r.layer << " expert=" << r.expert << " kept=" << r.kept
           << " dropped=" << r.dropped << " fraction=" << r.fraction
           << " image_frac=" << r.image_fraction << " text_frac=" << r.text_fraction
           << "\n";
    return os.str();
}

EvalReport evaluate(MultimodalModel& model, const EvalOptions& opts) {
    EvalReport rep;
    SplitRange split = test_split();
    model.clear_recorded_plans();
    model.set_record_plans(true);

    std::vector<std::vector<int>> closed_pred, closed_gt;
    real prec_sum = 0, rec_sum = 0;
    std::size_t open_n = 0;

    for (std::size_t k = 0; k < opts.n_vqa; ++k) {
        Sample s = make_sample(TaskKind::Vqa, split.begin + k, train_palette());
        std::vector<int> gen =
            model.generate(s.scene.image, s.prompt_ids, std::nullopt, split.begin + k);
        if (s.vqa_kind == 2) {
            auto [p, r] = token_precision_recall(gen, s.answer_ids);
            prec_sum += p;
            rec_sum += r;
            ++open_n;
        } else {
            closed_pred.push_back(gen);
            closed_gt.push_back(s.answer_ids);
        }
    }
    for (std::size_t k = 0; k < opts.n_region; ++k) {
        std::uint64_t seed = split.begin + 10000 + k;
        Sample s = make_sample(TaskKind::RegionQa, seed, train_palette());
        std::vector<int> gen = model.generate(s.scene.image, s.prompt_ids, s.region, seed);
        closed_pred.push_back(gen);
        closed_gt.push_back(s.answer_ids);
    }
    rep.closed_acc = closed_accuracy(closed_pred, closed_gt);
    rep.n_closed = closed_pred.size();
    if (open_n > 0) {
        rep.token_precision = prec_sum / static_cast<real>(open_n);
        rep.token_recall = rec_sum / static_cast<real>(open_n);
    }

    auto grounding_eval = [&](std::uint64_t seed, const std::vector<int>& palette,
                              std::size_t max_inst, Mask& out_pred, Mask& out_gt,
                              int& out_cls) {
        Sample s = make_sample(TaskKind::Grounding, seed, palette, max_inst);
        out_gt = *s.gt_mask;
        out_cls = s.target_class;
        std::vector<int> gen =
            model.generate(s.scene.image, s.prompt_ids, std::nullopt, seed);
        auto seg_it = std::find(gen.begin(), gen.end(), Vocab::kSeg);
        if (seg_it == gen.end()) {
            out_pred = Mask(s.gt_mask->h, s.gt_mask->w);  // no SEG emitted: empty mask
            return;
        }
        std::vector<int> ids = s.prompt_ids;
        ids.insert(ids.end(), gen.begin(), seg_it + 1);
        auto fr = model.forward_text(s.scene.image, ids, std::nullopt, seed);
        out_pred = model.decode_mask(fr, s.scene.image).binary();
    };

    std::vector<Mask> preds, gts;
    std::vector<int> classes;
    for (std::size_t k = 0; k < opts.n_grounding; ++k) {
        Mask p, g;
        int cls;
        // single-object scenes: dice then measures mask quality, and seen vs
        // zero-shot classes are scored under the same protocol
        grounding_eval(split.begin + 20000 + k, train_palette(), 1, p, g, cls);
        preds.push_back(p);
        gts.push_back(g);
        classes.push_back(cls);
    }
    rep.grounding = mdice(preds, gts, classes);

    if (opts.zeroshot && opts.n_zeroshot > 0) {
        std::vector<Mask> zp, zg;
        std::vector<int> zc;
        SplitRange zs = zeroshot_split();
        for (std::size_t k = 0; k < opts.n_zeroshot; ++k) {
            Mask p, g;
            int cls;
            // held-out palette, single-instance scenes
            grounding_eval(zs.begin + k, heldout_palette(), 1, p, g, cls);
            zp.push_back(p);
            zg.push_back(g);
            zc.push_back(cls);
        }
        rep.zeroshot_dice = mdice(zp, zg, zc).mean;
    }

    std::vector<MoELayer*> moes = model.moe_layers();
    std::vector<std::vector<DispatchPlan>> per_layer;
    for (MoELayer* moe : moes) per_layer.push_back(moe->plans);
    rep.routing = routing_report(per_layer);
    model.set_record_plans(false);
    model.clear_recorded_plans();
    return rep;
}

std::string format_report(const EvalReport& rep) {
    std::ostringstream os;
    os << "closed_accuracy all " << rep.closed_acc << "\n";
    os << "token_precision open " << rep.token_precision << "\n";
    os << "token_recall open " << rep.token_recall << "\n";
    for (const auto& [cls, d] : rep.grounding.per_class)
        os << "dice " << class_name(cls) << " " << d << "\n";
    os << "mdice seen " << rep.grounding.mean << "\n";
    os << "mdice zeroshot " << rep.zeroshot_dice << "\n";
    os << format_routing(rep.routing);
    return os.str();
}

}  // namespace mg
