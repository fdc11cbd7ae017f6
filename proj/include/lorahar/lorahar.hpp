#pragma once

#include "lorahar/data/dataset.hpp"
#include "lorahar/data/ingest.hpp"
#include "lorahar/data/synthetic.hpp"
#include "lorahar/eval/accounting.hpp"
#include "lorahar/eval/experiments.hpp"
#include "lorahar/eval/metrics.hpp"
#include "lorahar/eval/report.hpp"
#include "lorahar/finetune/head.hpp"
#include "lorahar/finetune/optim.hpp"
#include "lorahar/finetune/trainer.hpp"
#include "lorahar/io/checkpoint.hpp"
#include "lorahar/io/container.hpp"
#include "lorahar/model/mae.hpp"
#include "lorahar/model/transformer.hpp"
#include "lorahar/numerics/ops.hpp"
#include "lorahar/peft/lora.hpp"
#include "lorahar/peft/nf4.hpp"
#include "lorahar/peft/wrap.hpp"
